"""
Tests for losses, the optimizer and the progressive training stages
"""

import logging
from unittest.mock import patch

import numpy as np
import pytest

from nsp.autograd import Tensor, grad_check, no_grad, parameter
from nsp.config import NspConfig, Stage, TrainConfig
from nsp.cvae import kl_to_standard_normal
from nsp.exceptions import NonFiniteLossError, ShapeMismatchError
from nsp.forces import ForceDiagnostics
from nsp.networks import ModelParams
from nsp.rollout import AgentPrediction, RolloutResult, rollout_window
from nsp.simulation import synthetic_cohorts
from nsp.training import (
    Adam,
    AdamState,
    adam_update,
    cohort_loss,
    effective_k,
    effective_tau,
    evaluate_cvae_loss,
    loss_cvae,
    loss_traj,
    progressive_train,
    residual_dataset,
    train_cvae_stage,
    train_force_stage,
    trainable_only,
)


def _result(window_id, positions):
    pred = AgentPrediction(window_id=window_id, agent_id=window_id, frame_ids=[], positions=[Tensor(p) for p in positions])
    return RolloutResult(predictions={window_id: pred}, diagnostics=ForceDiagnostics())


def _mean_loss(cohorts, params, cfg, stage):
    with no_grad():
        return float(np.mean([cohort_loss(c, None, params, cfg, stage).item() for c in cohorts]))


def _generated(cfg, n_cohorts, agents=1, seed=0, **kwargs):
    """Windows produced by the model itself with tau (and k) held constant"""
    return synthetic_cohorts(cfg, n_cohorts, np.random.default_rng(seed), agents_per_cohort=agents, **kwargs)


def test_loss_traj_reference_values():
    truth = {"w": np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])}
    assert loss_traj(_result("w", [[1.0, 1.0], [2.0, 2.0]]), truth).item() == 0.0
    # errors (1, 0) and (0, 2): (1 + 4) / 2
    assert loss_traj(_result("w", [[2.0, 1.0], [2.0, 4.0]]), truth).item() == pytest.approx(2.5)


def test_loss_traj_needs_matching_truth():
    with pytest.raises(ShapeMismatchError):
        loss_traj(_result("w", [[0.0, 0.0]]), {"other": np.zeros((3, 2))})
    with pytest.raises(ShapeMismatchError):
        loss_traj(_result("w", [[0.0, 0.0], [1.0, 1.0]]), {"w": np.zeros((1, 2))})


def test_loss_cvae_reference_values():
    alpha = np.array([[1.0, 0.0], [0.0, 0.0]])
    zeros = np.zeros((2, 3))
    assert loss_cvae(alpha, alpha, zeros, zeros).item() == 0.0
    value = loss_cvae(alpha, np.zeros((2, 2)), np.ones((2, 3)), zeros, lambda_kl=2.0).item()
    assert value == pytest.approx(0.5 + 2.0 * 1.5)
    with pytest.raises(ShapeMismatchError):
        loss_cvae(alpha, np.zeros((3, 2)), zeros, zeros)


def test_adam_first_step_moves_by_learning_rate():
    p = parameter([1.0, -1.0, 0.5])
    state = adam_update({"p": p}, {"p": np.array([3.0, -0.2, 0.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(p.data, [0.9, -0.9, 0.5], atol=1e-6)
    assert state.step == 1


def test_adam_ignores_missing_gradients():
    p = parameter([2.0])
    adam_update({"p": p}, {"p": None}, AdamState(), lr=0.1)
    assert p.data[0] == 2.0


def test_adam_keeps_k_env_non_negative():
    k_env = parameter(0.05, "k_env")
    adam_update({"k_env": k_env}, {"k_env": np.array(1.0)}, AdamState(), lr=0.1)
    assert float(k_env.data) == 0.0


def test_adam_minimizes_quadratic():
    x = parameter([5.0, -3.0])
    optimizer = Adam({"x": x}, lr=0.1)
    for _ in range(500):
        optimizer.zero_grad()
        ((x - Tensor([1.0, 2.0])) * (x - Tensor([1.0, 2.0]))).sum().backward()
        optimizer.step()
    np.testing.assert_allclose(x.data, [1.0, 2.0], atol=1e-2)


def test_trainable_only_restores_flags(small_cfg):
    params = ModelParams.build(small_cfg)
    with trainable_only(params, ["cvae"]) as trainable:
        assert set(trainable) == set(params.group("cvae"))
        assert not params.k_env.requires_grad
    assert all(p.requires_grad for p in params.named_parameters().values())


def test_end_to_end_gradients_through_a_rollout():
    """Gradients of l_traj through 12 coupled steps match finite differences"""
    cfg = NspConfig(embed_dim=2, lstm_hidden=3, mlp_hidden=3, latent_dim=2, hidden_activation="tanh")
    cohort = _generated(NspConfig(fixed_tau=0.6, fixed_k=30.0), 1, agents=2, extent=80.0, seed=3)[0]
    params = ModelParams.build(cfg, seed=4)

    def f():
        return cohort_loss(cohort, None, params, cfg, Stage.ADD_REPULSION)

    tensors = list(params.group("goal").values()) + list(params.group("collision").values())
    assert grad_check(f, tensors) < 1e-3


def test_generator_windows_have_no_residual():
    """Ground-truth-conditioned one-step predictions with the generating constants are exact"""
    cfg = NspConfig(fixed_tau=0.7)
    cohorts = _generated(cfg, 3)
    alpha, history = residual_dataset(cohorts, None, None, cfg)
    assert alpha.shape == (36, 2)
    assert history.shape == (36, 8, 2)
    np.testing.assert_allclose(alpha, 0.0, atol=1e-8)


def test_overfit_single_window():
    """Training the goal stage on one generated window drives l_traj to zero"""
    cfg = NspConfig(embed_dim=4, lstm_hidden=5, mlp_hidden=6, latent_dim=3)
    cohorts = _generated(cfg.model_copy(update={"fixed_tau": 0.8}), 1, seed=2)
    params = ModelParams.build(cfg, seed=None)
    train_cfg = TrainConfig(lr_force=5e-2, lr_decay=0.98, epochs=300, batch_size=1)

    initial = cohort_loss(cohorts[0], None, params, cfg, Stage.GOAL_ONLY).item()
    records = train_force_stage(cohorts, None, params, cfg, train_cfg, Stage.GOAL_ONLY)
    final = cohort_loss(cohorts[0], None, params, cfg, Stage.GOAL_ONLY).item()
    assert final < min(initial, 1e-2)
    assert len(records) == 300


def test_goal_stage_freezes_everything_else(small_cfg):
    cohorts = _generated(NspConfig(fixed_tau=0.5), 2)
    params = ModelParams.build(small_cfg, seed=1)
    before = params.state_dict()
    train_force_stage(cohorts, None, params, small_cfg, TrainConfig(lr_force=1e-2, epochs=1, batch_size=2), Stage.GOAL_ONLY)
    after = params.state_dict()
    changed = {name for name in before if not np.array_equal(before[name], after[name])}
    assert changed
    assert changed <= set(params.group("goal"))


def test_repulsion_stage_keeps_goal_network_fixed(small_cfg):
    cohorts = _generated(NspConfig(fixed_tau=0.5, fixed_k=40.0), 4, agents=3, extent=60.0)
    params = ModelParams.build(small_cfg, seed=1)
    snapshots = {}

    def snapshot(stage, current):
        snapshots[stage] = current.state_dict()

    train_cfg = TrainConfig(lr_force=1e-2, epochs=1, batch_size=2)
    progressive_train(cohorts, None, params, small_cfg, train_cfg, [Stage.GOAL_ONLY, Stage.ADD_REPULSION], snapshot)
    goal, repulsion = snapshots[Stage.GOAL_ONLY], snapshots[Stage.ADD_REPULSION]
    for name in params.group("goal"):
        assert np.array_equal(goal[name], repulsion[name])
    assert any(not np.array_equal(goal[name], repulsion[name]) for name in params.collision_net.named_parameters())


def test_cvae_stage_keeps_forces_fixed(small_cfg):
    cohorts = _generated(NspConfig(fixed_tau=0.5), 2, noise=3.0)
    params = ModelParams.build(small_cfg, seed=1)
    before = params.state_dict()
    report = progressive_train(cohorts, None, params, small_cfg, TrainConfig(lr_cvae=1e-3, cvae_epochs=2), [Stage.CVAE_ONLY])
    after = params.state_dict()
    forces = set(params.group("goal")) | set(params.group("collision"))
    assert all(np.array_equal(before[name], after[name]) for name in forces)
    assert any(not np.array_equal(before[name], after[name]) for name in params.group("cvae"))
    assert len(report.stage_losses(Stage.CVAE_ONLY)) == 2


def test_cvae_stage_learns_a_constant_offset():
    cfg = NspConfig(embed_dim=4, mlp_hidden=8, latent_dim=2)
    params = ModelParams.build(cfg, seed=0)
    rng = np.random.default_rng(0)
    history = np.cumsum(rng.normal(0, 10, size=(256, 8, 2)), axis=1)
    alpha = np.tile([100.0, -60.0], (256, 1))

    initial = evaluate_cvae_loss(alpha, history, params, cfg)
    train_cvae_stage(alpha, history, params, cfg, TrainConfig(lr_cvae=1e-2, cvae_epochs=200, cvae_batch_size=256))
    final = evaluate_cvae_loss(alpha, history, params, cfg)
    assert final * 5 <= initial


def test_non_finite_loss_stops_training(small_cfg):
    cohorts = _generated(NspConfig(fixed_tau=0.5), 1)
    params = ModelParams.build(small_cfg)
    with patch("nsp.training.cohort_loss", return_value=parameter(float("nan"))):
        with pytest.raises(NonFiniteLossError):
            train_force_stage(cohorts, None, params, small_cfg, TrainConfig(epochs=1), Stage.GOAL_ONLY)


def test_epoch_records_reach_the_metrics_logger(small_cfg, caplog):
    cohorts = _generated(NspConfig(fixed_tau=0.5), 1)
    params = ModelParams.build(small_cfg)
    with caplog.at_level(logging.INFO, logger="nsp.metrics"):
        train_force_stage(cohorts, None, params, small_cfg, TrainConfig(epochs=2, lr_decay=0.5), Stage.GOAL_ONLY)
    records = [r for r in caplog.records if r.name == "nsp.metrics"]
    assert [r.epoch for r in records] == [0, 1]
    assert records[1].learning_rate == pytest.approx(0.5e-4)
    assert records[0].stage == "goal"


def test_effective_tau_with_constant_relaxation():
    cfg = NspConfig(fixed_tau=0.7)
    assert effective_tau(_generated(cfg, 2), None, None, cfg) == pytest.approx(0.7)


def test_zero_weights_reproduce_midpoint_tau(small_cfg):
    """A fresh zero network predicts tau = a_tau / 2 + b_tau at every step"""
    cohorts = _generated(NspConfig(fixed_tau=0.5), 2)
    params = ModelParams.build(small_cfg, seed=None)
    assert effective_tau(cohorts, None, params, small_cfg) == pytest.approx(0.9)


@pytest.mark.slow
def test_goal_stage_recovers_generating_tau():
    """Windows generated with tau = 0.5 teach the Goal-Network an effective tau near 0.5"""
    cfg = NspConfig(b_tau=0.1, embed_dim=4, lstm_hidden=6, mlp_hidden=8, latent_dim=3)
    cohorts = _generated(cfg.model_copy(update={"fixed_tau": 0.5}), 8, seed=5)
    params = ModelParams.build(cfg, seed=None)
    train_cfg = TrainConfig(lr_force=1e-2, lr_decay=0.97, epochs=60, batch_size=2)

    initial = _mean_loss(cohorts, params, cfg, Stage.GOAL_ONLY)
    train_force_stage(cohorts, None, params, cfg, train_cfg, Stage.GOAL_ONLY)
    assert _mean_loss(cohorts, params, cfg, Stage.GOAL_ONLY) <= 0.1 * initial
    assert effective_tau(cohorts, None, params, cfg) == pytest.approx(0.5, rel=0.2)


def test_kl_term_is_differentiable():
    mu, log_var = parameter([0.3, -0.2]), parameter([0.1, -0.4])
    assert grad_check(lambda: kl_to_standard_normal(mu, log_var), [mu, log_var]) < 1e-5


def test_rollout_loss_matches_manual_sum(small_cfg, straight_window):
    window = straight_window("a", (0.0, 0.0), (30.0, 10.0))
    params = ModelParams.build(small_cfg, seed=2)
    result = rollout_window([window], None, params, small_cfg)
    expected = np.mean(np.sum((result.positions("a@0") - window.positions()[8:]) ** 2, axis=1))
    assert loss_traj(result, [window]).item() == pytest.approx(expected)


def test_effective_k_of_zero_network(small_cfg):
    """Zero weights give k = a_k / 2 + b_k on every pair"""
    cohorts = _generated(NspConfig(fixed_tau=0.5, fixed_k=40.0), 2, agents=3, extent=60.0)
    params = ModelParams.build(small_cfg, seed=None)
    assert effective_k(cohorts, params, small_cfg) == pytest.approx(small_cfg.a_k / 2 + small_cfg.b_k)
    assert effective_k(cohorts, params, small_cfg.model_copy(update={"fixed_k": 12.0})) == 12.0
    with pytest.raises(ValueError):
        effective_k(_generated(NspConfig(fixed_tau=0.5), 2), params, small_cfg)


@pytest.mark.slow
def test_repulsion_stage_recovers_generating_k():
    """Crowded windows generated with k = 25 teach the Collision-Network an effective k near 25"""
    cfg = NspConfig(fixed_tau=0.5, embed_dim=4, lstm_hidden=6, mlp_hidden=8, latent_dim=3)
    cohorts = _generated(cfg.model_copy(update={"fixed_k": 25.0}), 8, agents=3, extent=60.0, seed=7)
    params = ModelParams.build(cfg, seed=None)
    train_cfg = TrainConfig(lr_force=2e-2, lr_decay=0.97, epochs=60, batch_size=2)

    initial = _mean_loss(cohorts, params, cfg, Stage.ADD_REPULSION)
    assert effective_k(cohorts, params, cfg) == pytest.approx(50.0)
    train_force_stage(cohorts, None, params, cfg, train_cfg, Stage.ADD_REPULSION)
    assert _mean_loss(cohorts, params, cfg, Stage.ADD_REPULSION) <= 0.25 * initial
    assert effective_k(cohorts, params, cfg) == pytest.approx(25.0, rel=0.3)
