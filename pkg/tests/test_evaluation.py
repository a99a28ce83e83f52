"""
Tests for metrics, sampling protocols and scenario generation
"""

import numpy as np
import pytest

from nsp.config import NspConfig
from nsp.data_io import prediction_id, write_trajectories
from nsp.evaluation import (
    collision_count,
    collision_rate,
    displacement_errors,
    evaluate_protocols,
    generate_scenario,
    min_of_k,
    score_files,
    standard_sample_goals,
)
from nsp.exceptions import EmptySampleSetError, InfeasibleSceneError, ShapeMismatchError, TooFewAgentsError
from nsp.models import CellClass, CollisionSpec, Homography, SceneGrid
from nsp.networks import ModelParams
from nsp.simulation import synthetic_cohorts


def test_displacement_errors_reference():
    truth = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert displacement_errors(truth, truth) == (0.0, 0.0)
    ade, fde = displacement_errors(truth + [0.0, 3.0], truth)
    assert (ade, fde) == pytest.approx((3.0, 3.0))
    ade, fde = displacement_errors([[0.0, 0.0], [1.0, 0.0], [5.0, 4.0]], truth)
    assert (ade, fde) == pytest.approx((5.0 / 3.0, 5.0))


def test_displacement_errors_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        displacement_errors(np.zeros((3, 2)), np.zeros((4, 2)))


def test_min_of_k_minimizes_each_error_separately():
    truth = np.zeros((2, 2))
    good_start = np.array([[0.0, 0.0], [10.0, 0.0]])
    good_end = np.array([[6.0, 0.0], [1.0, 0.0]])
    ade, fde = min_of_k([good_start, good_end], truth)
    assert ade == pytest.approx(3.5)
    assert fde == pytest.approx(1.0)
    assert min_of_k([good_start], truth) == displacement_errors(good_start, truth)
    with pytest.raises(EmptySampleSetError):
        min_of_k([], truth)


def test_min_of_k_never_grows_with_more_samples():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        truth = rng.normal(0, 50, size=(12, 2))
        samples = list(truth + rng.normal(0, 20, size=(int(rng.integers(2, 9)), 12, 2)))
        cut = int(rng.integers(1, len(samples)))
        small, large = min_of_k(samples[:cut], truth), min_of_k(samples, truth)
        assert large[0] <= small[0] and large[1] <= small[1]


def test_collision_rate_reference_values():
    spec = CollisionSpec(radius=1.0)
    frames = np.arange(5, dtype=float)
    a = np.column_stack([frames, np.zeros(5)])
    b = np.column_stack([frames, np.full(5, 1.5)])
    c = np.column_stack([frames, np.full(5, 100.0)])
    assert collision_count(np.stack([a, b, c]), spec) == 1
    assert collision_rate(np.stack([a, b, c]), spec) == pytest.approx(1.0 / 3.0)
    assert collision_rate(np.stack([a, c]), spec) == 0.0
    assert collision_rate(np.stack([a, b]), spec) == 1.0


def test_collision_interval_and_absent_agents():
    a = np.zeros((6, 2))
    b = np.column_stack([np.array([0.0, 50, 50, 50, 50, 50]), np.zeros(6)])
    assert collision_count(np.stack([a, b]), CollisionSpec(radius=1.0)) == 1
    assert collision_count(np.stack([a, b]), CollisionSpec(radius=1.0, interval=(1, 6))) == 0
    b[0] = np.nan
    assert collision_count(np.stack([a, b]), CollisionSpec(radius=1.0)) == 0


def test_collision_rate_properties():
    """Invariant under agent permutation and non-decreasing in the radius"""
    rng = np.random.default_rng(1)
    traj = np.cumsum(rng.normal(0, 5, size=(8, 12, 2)), axis=1)
    rates = [collision_rate(traj, CollisionSpec(radius=r)) for r in (1.0, 3.0, 6.0, 12.0)]
    assert rates == sorted(rates)
    perm = rng.permutation(8)
    assert collision_rate(traj[perm], CollisionSpec(radius=3.0)) == rates[1]


def test_collision_rate_needs_two_agents():
    with pytest.raises(TooFewAgentsError):
        collision_rate(np.zeros((1, 4, 2)), CollisionSpec())


def test_generated_scenario_constraints():
    grid = SceneGrid.empty(100, 100)
    scenario = generate_scenario(grid, 50, np.random.default_rng(3))
    starts = np.array([s.p for s in scenario.states])
    goals = np.array(scenario.goals)
    assert len({tuple(p) for p in starts.tolist()}) == 50

    def edge(points):
        x, y = points[:, 0], points[:, 1]
        return np.stack([y, 99 - y, x, 99 - x], axis=1).argmin(axis=1)

    assert starts.min() >= 0 and goals.max() <= 99
    assert np.all(np.minimum.reduce([starts[:, 1], 99 - starts[:, 1], starts[:, 0], 99 - starts[:, 0]]) < 10)
    assert np.all(edge(starts) != edge(goals))
    speeds = np.linalg.norm([s.v for s in scenario.states], axis=1)
    assert np.all((speeds >= 20.0) & (speeds <= 40.0))


def test_generated_scenario_is_seeded():
    grid = SceneGrid.empty(60, 80)
    a = generate_scenario(grid, 10, np.random.default_rng(5))
    b = generate_scenario(grid, 10, np.random.default_rng(5))
    assert a == b


def test_scenario_avoids_obstacles():
    cells = np.zeros((50, 50), dtype=int)
    cells[:5, :] = CellClass.UNWALKABLE
    scenario = generate_scenario(SceneGrid(height=50, width=50, cells=cells), 20, np.random.default_rng(0))
    for s, g in zip(scenario.states, scenario.goals):
        assert cells[int(s.p[1]), int(s.p[0])] == CellClass.WALKABLE
        assert cells[int(g[1]), int(g[0])] == CellClass.WALKABLE


def test_infeasible_scenarios():
    blocked = SceneGrid(height=20, width=20, cells=np.ones((20, 20), dtype=int))
    with pytest.raises(InfeasibleSceneError):
        generate_scenario(blocked, 1, np.random.default_rng(0))
    with pytest.raises(InfeasibleSceneError):
        generate_scenario(SceneGrid.empty(20, 20), 500, np.random.default_rng(0))


def test_standard_goal_sampling():
    rng = np.random.default_rng(0)
    exact = standard_sample_goals((120.0, 45.0), 1e-9, 5, rng)
    np.testing.assert_array_equal(exact, np.tile([120.0, 45.0], (5, 1)))

    draws = standard_sample_goals((0.0, 0.0), 50.0, 100000, rng)
    assert np.all(draws == np.rint(draws))
    np.testing.assert_allclose(draws.std(axis=0), [50.0, 50.0], rtol=0.02)
    np.testing.assert_allclose(draws.mean(axis=0), [0.0, 0.0], atol=1.0)


def _linear_residual_model(cfg, step_std):
    """Parameters whose prior samples are isotropic Gaussian residuals of std step_std (px)"""
    params = ModelParams.build(cfg, seed=0)
    first, second = params.cvae.d_latent
    for layer in (first, second):
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    gain = step_std * cfg.cvae_scale / cfg.sigma_latent
    first.weight.data[0, 0] = first.weight.data[1, 1] = 1.0
    second.weight.data[0, 0] = second.weight.data[1, 1] = gain
    return params


def test_protocols_are_ordered():
    """Ultra-sampling beats standard sampling, which beats the deterministic rollout"""
    cfg = NspConfig(fixed_tau=0.5, fixed_k=25.0, hidden_activation="identity", embed_dim=4, mlp_hidden=6, latent_dim=3)
    cohorts = synthetic_cohorts(cfg, 6, np.random.default_rng(2), agents_per_cohort=2, noise=5.0, extent=300.0)
    params = _linear_residual_model(cfg, 5.0)

    report = evaluate_protocols(cohorts, None, params, cfg, seed=1)
    assert report.deterministic.windows == 12
    assert report.ultra.ade <= report.standard.ade <= report.deterministic.ade


def test_protocols_do_not_depend_on_thread_count():
    cfg = NspConfig(fixed_tau=0.5, fixed_k=25.0, hidden_activation="identity", embed_dim=4, mlp_hidden=6, latent_dim=3, goal_samples=3)
    cohorts = synthetic_cohorts(cfg, 3, np.random.default_rng(0), agents_per_cohort=2, noise=2.0)
    params = _linear_residual_model(cfg, 2.0)
    assert evaluate_protocols(cohorts, None, params, cfg, seed=4) == evaluate_protocols(cohorts, None, params, cfg, seed=4, threads=3)


def _write_truth(path):
    rows = []
    for agent, y in (("a", 0.0), ("b", 10.0), ("c", 500.0)):
        rows.extend((frame, agent, float(frame), y) for frame in range(0, 120, 10))
    write_trajectories(path, rows)
    return rows


def test_scoring_truth_against_itself(tmp_path):
    truth = tmp_path / "truth.txt"
    rows = _write_truth(truth)
    report = score_files(truth, truth)
    assert report.ade == 0.0 and report.fde == 0.0
    assert [r.window for r in report.records] == ["a@0", "b@0", "c@0"]
    # a and b stay 10 px apart, inside 2 * 15 px
    assert report.collision_rate == pytest.approx(1.0 / 3.0)
    assert len(rows) == 36


def test_scoring_min_over_samples(tmp_path):
    truth = tmp_path / "truth.txt"
    _write_truth(truth)
    pred = tmp_path / "pred.txt"
    rows = []
    for k, shift in enumerate((6.0, 2.0, 9.0)):
        rows.extend((frame, prediction_id("a@0", k), float(frame), shift) for frame in range(80, 120, 10))
    write_trajectories(pred, rows)
    report = score_files(pred, truth)
    assert report.records[0].samples == 3
    assert report.ade == pytest.approx(2.0)
    assert report.collision_rate is None


def test_scoring_in_world_units(tmp_path):
    truth = tmp_path / "truth.txt"
    _write_truth(truth)
    pred = tmp_path / "pred.txt"
    write_trajectories(pred, [(frame, "a", float(frame) + 3.0, 4.0) for frame in range(0, 120, 10)])
    pixels = score_files(pred, truth)
    world = score_files(pred, truth, homography=Homography(matrix=[[0.5, 0, 2], [0, 0.5, -1], [0, 0, 1]]))
    assert pixels.ade == pytest.approx(5.0)
    assert world.ade == pytest.approx(2.5)
    assert world.units == "world"


def test_scoring_requires_truth_frames(tmp_path):
    truth = tmp_path / "truth.txt"
    _write_truth(truth)
    pred = tmp_path / "pred.txt"
    write_trajectories(pred, [(5, "a", 0.0, 0.0), (15, "a", 1.0, 0.0)])
    with pytest.raises(ShapeMismatchError):
        score_files(pred, truth)
