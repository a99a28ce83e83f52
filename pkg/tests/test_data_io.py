"""
Tests for trajectory, scene, homography and checkpoint files
"""

from pathlib import Path

import numpy as np
import pytest

from nsp.config import NspConfig
from nsp.exceptions import (
    CheckpointError,
    DegenerateProjectionError,
    InvalidLabelError,
    IoError,
    NonMonotoneFramesError,
    ParseError,
)
from nsp.data_io import (
    apply_homography,
    dynamic_obstacles,
    group_cohorts,
    load_checkpoint,
    load_cohorts,
    load_homography,
    load_scene_grid,
    load_trajectories,
    parse_prediction_id,
    prediction_id,
    save_checkpoint,
    save_scene_grid,
    window_split,
    write_trajectories,
)
from nsp.models import CellClass, Homography, RawTrack, SceneGrid, validate_window
from nsp.networks import ModelParams

TOY_DATA = Path(__file__).resolve().parent.parent / "data" / "toy"


def _track(agent, n, step=10, start=0):
    return RawTrack(agent_id=agent, records=[(start + k * step, float(k), 2.0 * k) for k in range(n)])


def test_load_trajectories_groups_and_sorts(tmp_path):
    path = tmp_path / "traj.txt"
    path.write_text("# frame agent x y\n10\t1\t1.0\t1.5\n0 1 0.0 0.5\n\n0.0\t2\t5\t5\n")
    tracks = load_trajectories(path)
    assert [t.agent_id for t in tracks] == ["1", "2"]
    assert tracks[0].frame_ids() == [0, 10]
    np.testing.assert_array_equal(tracks[0].positions(), [[0.0, 0.5], [1.0, 1.5]])


@pytest.mark.parametrize(
    "row",
    ["0 1 2.0", "0 1 x 2.0", "0.5 1 1.0 2.0", "0 1 nan 2.0"],
)
def test_load_trajectories_reports_bad_lines(tmp_path, row):
    path = tmp_path / "traj.txt"
    path.write_text("0 1 0.0 0.0\n" + row + "\n")
    with pytest.raises(ParseError) as e:
        load_trajectories(path)
    assert e.value.line == 2
    assert "line 2" in str(e.value)


def test_duplicate_frames_are_rejected(tmp_path):
    path = tmp_path / "traj.txt"
    path.write_text("0 1 0.0 0.0\n0 1 1.0 1.0\n")
    with pytest.raises(NonMonotoneFramesError):
        load_trajectories(path)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        load_trajectories(tmp_path / "nope.txt")


@pytest.mark.parametrize("length,expected", [(20, 1), (40, 2), (39, 1), (19, 0)])
def test_window_split_counts(length, expected):
    assert len(window_split([_track("a", length)])) == expected


def test_window_split_windows_are_valid():
    windows = window_split([_track("a", 60)], stride=10, dt=0.4)
    assert [w.start_frame for w in windows] == [0, 100, 200, 300, 400]
    for w in windows:
        validate_window(w)
    np.testing.assert_allclose(windows[1].velocities()[0], [1.0 / 0.4, 2.0 / 0.4])


def test_window_split_skips_gaps():
    records = [(k * 10 if k < 10 else k * 10 + 5, float(k), 0.0) for k in range(20)]
    assert window_split([RawTrack(agent_id="a", records=records)]) == []


def test_cohorts_share_frame_spans():
    tracks = [_track("a", 40), _track("b", 40), _track("c", 20, start=100)]
    windows = window_split(tracks)
    cohorts = group_cohorts(windows, tracks)
    assert [len(c) for c in cohorts] == [2, 1, 2]
    assert [c.start_frame for c in cohorts] == [0, 100, 200]
    # agent c is a moving obstacle for the first cohort from frame 100 on
    assert sorted(cohorts[0].obstacles) == list(range(10, 20))
    assert cohorts[0].obstacles[10][0].p == (0.0, 0.0)


def test_dynamic_obstacles_exclude_members():
    tracks = [_track("a", 20), _track("b", 20)]
    windows = window_split(tracks[:1])
    obstacles = dynamic_obstacles(tracks, windows, 0.4)
    assert len(obstacles) == 20
    assert all(len(states) == 1 for states in obstacles.values())
    assert obstacles[5][0].v == pytest.approx((2.5, 5.0))


def test_toy_dataset_loads():
    tracks, cohorts = load_cohorts(TOY_DATA / "trajectories.txt", NspConfig())
    assert len(tracks) == 5
    assert sum(len(c) for c in cohorts) == 8
    assert [c.start_frame for c in cohorts] == [0, 200]


def test_trajectory_file_round_trip(tmp_path):
    rows = [(0, "a", 0.1, 1.0 / 3.0), (10, "a", 1e-7, -123.456789)]
    path = tmp_path / "out" / "pred.txt"
    assert write_trajectories(path, rows) == 2
    tracks = load_trajectories(path)
    np.testing.assert_array_equal(tracks[0].positions(), [[0.1, 1.0 / 3.0], [1e-7, -123.456789]])
    assert not list(path.parent.glob("*.tmp"))


def test_prediction_ids():
    assert prediction_id("ped7@120", 3) == "ped7@120#3"
    assert parse_prediction_id("ped@7@120#3") == ("ped@7", 120, 3)
    with pytest.raises(ParseError):
        parse_prediction_id("ped7")


def test_homography_reference_values():
    identity = np.eye(3)
    np.testing.assert_allclose(apply_homography(identity, (5.0, 7.0)), [5.0, 7.0])
    h = Homography(matrix=[[2, 0, 1], [0, 2, -1], [0, 0, 1]])
    np.testing.assert_allclose(apply_homography(h, (1.0, 1.0)), [3.0, 1.0])
    np.testing.assert_allclose(apply_homography(h, (3.0, 1.0), "world_to_pixel"), [1.0, 1.0])
    many = apply_homography(h, np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert many.shape == (2, 2)


def test_homography_round_trip_on_random_points():
    rng = np.random.default_rng(0)
    h = Homography(matrix=[[0.02, 0.001, -3.0], [-0.002, 0.025, 1.0], [1e-5, 2e-5, 1.0]])
    points = rng.uniform(0, 500, size=(100, 2))
    back = apply_homography(h, apply_homography(h, points), "world_to_pixel")
    np.testing.assert_allclose(back, points, atol=1e-6)


def test_point_at_infinity():
    h = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]) + np.diag([0.0, 0.0, 1e-3])
    with pytest.raises(DegenerateProjectionError):
        apply_homography(h, (-1e-3, 0.0))


def test_load_homography(tmp_path):
    path = tmp_path / "H.txt"
    path.write_text("1 0 0\n0 1 0\n0 0 1\n")
    np.testing.assert_array_equal(load_homography(path).as_array(), np.eye(3))
    path.write_text("1 0 0\n0 1\n0 0 1\n")
    with pytest.raises(ParseError):
        load_homography(path)


def test_scene_grid_file(tmp_path):
    path = tmp_path / "scene.txt"
    path.write_text("2 3\n0 0 1\n2 0 0\n")
    grid = load_scene_grid(path)
    assert grid.cells[0, 2] == CellClass.UNWALKABLE
    assert grid.cells[1, 0] == CellClass.WEAK_OBSTACLE

    copy = tmp_path / "copy.txt"
    save_scene_grid(grid, copy)
    np.testing.assert_array_equal(load_scene_grid(copy).cells, grid.cells)


@pytest.mark.parametrize(
    "text,error",
    [("2 2\n0 0\n", ParseError), ("2 2\n0 0\n0 0 0\n", ParseError), ("1 2\n0 7\n", InvalidLabelError), ("", ParseError)],
)
def test_scene_grid_errors(tmp_path, text, error):
    path = tmp_path / "scene.txt"
    path.write_text(text)
    with pytest.raises(error):
        load_scene_grid(path)


def test_toy_scene_grid():
    grid = load_scene_grid(TOY_DATA / "scene.txt")
    assert (grid.height, grid.width) == (120, 160)
    assert grid.count(CellClass.UNWALKABLE) > 0
    assert grid.count(CellClass.WEAK_OBSTACLE) > 0


def test_checkpoint_round_trip(tmp_path, small_cfg):
    params = ModelParams.build(small_cfg, seed=7, k_env_init=2.5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, small_cfg, path)
    loaded, cfg = load_checkpoint(path)
    assert cfg == small_cfg
    for name, value in params.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[name], value)


def test_checkpoint_errors(tmp_path, small_cfg):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint\n{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)

    path = tmp_path / "model.ckpt"
    save_checkpoint(ModelParams.build(small_cfg), small_cfg, path)
    path.write_bytes(path.read_bytes()[:-12])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

    with pytest.raises(IoError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_empty_grid_helper():
    grid = SceneGrid.empty(3, 4)
    assert grid.count(CellClass.WALKABLE) == 12
