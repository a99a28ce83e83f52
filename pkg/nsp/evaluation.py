"""
Evaluation
Displacement errors, sampling protocols, collision rates and crowd scenario generation
"""

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import no_grad
from .config import NspConfig
from .data_io import Cohort, PathLike, apply_homography, load_trajectories, parse_prediction_id
from .exceptions import (
    EmptySampleSetError,
    InfeasibleSceneError,
    ParseError,
    ShapeMismatchError,
    TooFewAgentsError,
)
from .models import (
    AgentState,
    CellClass,
    CollisionSpec,
    Homography,
    MetricRecord,
    ProtocolReport,
    ProtocolScore,
    Scenario,
    SceneGrid,
    ScoreReport,
)
from .networks import ModelParams
from .rollout import RolloutMode, oracle_from_windows, rollout_window

logger = logging.getLogger(__name__)


def displacement_errors(pred, truth) -> Tuple[float, float]:
    """ADE (mean pointwise distance) and FDE (distance at the last point)"""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[0] == 0:
        raise ShapeMismatchError(f"prediction {pred.shape} vs truth {truth.shape}")
    dist = np.linalg.norm(pred - truth, axis=1)
    return float(dist.mean()), float(dist[-1])


def min_of_k(pred_samples, truth) -> Tuple[float, float]:
    """Minimum ADE and minimum FDE over K samples, each minimized on its own"""
    if len(pred_samples) == 0:
        raise EmptySampleSetError("no samples to take the minimum over")
    errors = np.array([displacement_errors(sample, truth) for sample in pred_samples])
    return float(errors[:, 0].min()), float(errors[:, 1].min())


def _pair_min_distances(trajectories: np.ndarray) -> np.ndarray:
    """(N, N) minimum distance over frames; NaN frames (absent agents) are ignored"""
    diff = trajectories[:, None, :, :] - trajectories[None, :, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    dist = np.where(np.isnan(dist), np.inf, dist)
    return dist.min(axis=-1)


def collision_count(trajectories, spec: CollisionSpec) -> int:
    """Unordered pairs whose minimum distance over the interval falls below 2r"""
    traj = np.asarray(trajectories, dtype=np.float64)
    if traj.ndim != 3 or traj.shape[-1] != 2:
        raise ShapeMismatchError(f"trajectories must be (agents, frames, 2), got {traj.shape}")
    if traj.shape[0] < 2:
        raise TooFewAgentsError(f"collision rate needs at least 2 agents, got {traj.shape[0]}")
    if spec.interval is not None:
        traj = traj[:, spec.interval[0]:spec.interval[1]]
    closest = _pair_min_distances(traj)
    upper = np.triu_indices(traj.shape[0], k=1)
    return int(np.count_nonzero(closest[upper] < 2.0 * spec.radius))


def collision_rate(trajectories, spec: CollisionSpec) -> float:
    """Colliding pairs over the N(N-1)/2 possible pairs"""
    n = np.asarray(trajectories).shape[0]
    count = collision_count(trajectories, spec)
    return count / (n * (n - 1) / 2)


# -- scenarios ---------------------------------------------------------------

def _boundary_cells(grid: SceneGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Walkable cells in the boundary band and the index of their nearest edge (0 top, 1 bottom, 2 left, 3 right)"""
    band = max(1, int(0.1 * min(grid.height, grid.width)))
    rows, cols = np.nonzero(grid.cells == CellClass.WALKABLE)
    edge_dist = np.stack([rows, grid.height - 1 - rows, cols, grid.width - 1 - cols], axis=1)
    nearest = edge_dist.min(axis=1)
    inside = nearest < band
    cells = np.column_stack([cols[inside], rows[inside]]).astype(np.float64)
    return cells, edge_dist[inside].argmin(axis=1)


def generate_scenario(
    grid: SceneGrid,
    n_agents: int,
    rng: np.random.Generator,
    speed_range: Tuple[float, float] = (20.0, 40.0),
) -> Scenario:
    """
    Random starts and goals on walkable boundary cells

    Starts are distinct; each goal lies on a different edge than its start.
    Initial velocities point at the goal with a speed drawn uniformly from
    speed_range (px/s).

    Raises:
        InfeasibleSceneError: not enough walkable boundary cells
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    cells, edges = _boundary_cells(grid)
    if len(cells) < n_agents:
        raise InfeasibleSceneError(f"{len(cells)} walkable boundary cells for {n_agents} agents")
    if len(np.unique(edges)) < 2:
        raise InfeasibleSceneError("walkable boundary cells lie on a single edge")

    starts = rng.choice(len(cells), size=n_agents, replace=False)
    states, goals = [], []
    for index in starts:
        start, edge = cells[index], edges[index]
        candidates = np.flatnonzero(edges != edge)
        goal = cells[candidates[rng.integers(len(candidates))]]
        heading = (goal - start) / np.linalg.norm(goal - start)
        speed = rng.uniform(*speed_range)
        states.append(AgentState(p=tuple(start.tolist()), v=tuple((heading * speed).tolist())))
        goals.append(tuple(goal.tolist()))
    return Scenario(states=states, goals=goals)


# -- sampling protocols ------------------------------------------------------

def standard_sample_goals(true_goal, sigma_goal: float, K: int, rng: np.random.Generator) -> np.ndarray:
    """K goals drawn around true_goal with std sigma_goal, rounded to pixel centres"""
    if K < 1:
        raise ValueError("K must be >= 1")
    if sigma_goal <= 0:
        raise ValueError("sigma_goal must be positive")
    centre = np.asarray(true_goal, dtype=np.float64)
    return np.rint(centre + rng.normal(0.0, sigma_goal, size=(K, 2)))


def _cohort_protocols(
    cohort: Cohort, grid: Optional[SceneGrid], params: ModelParams, cfg: NspConfig, rng: np.random.Generator
) -> Dict[str, List[Tuple[float, float]]]:
    windows = cohort.windows
    truth = {w.window_id: w.positions()[cfg.obs_len:] for w in windows}
    goal_sets = {w.window_id: standard_sample_goals(w.goal_array(), cfg.sigma_goal, cfg.goal_samples, rng) for w in windows}
    scores: Dict[str, List[Tuple[float, float]]] = defaultdict(list)

    with no_grad():
        first_goals = {wid: goals[0] for wid, goals in goal_sets.items()}
        det = rollout_window(windows, grid, params, cfg, RolloutMode.DETERMINISTIC, goals=first_goals, obstacles=cohort.obstacles)

        samples: Dict[str, List[np.ndarray]] = defaultdict(list)
        for k in range(cfg.goal_samples):
            goals = {wid: g[k] for wid, g in goal_sets.items()}
            sto = rollout_window(windows, grid, params, cfg, RolloutMode.STOCHASTIC, rng=rng, goals=goals, obstacles=cohort.obstacles)
            for wid in truth:
                samples[wid].append(sto.positions(wid))

        ultra = rollout_window(
            windows, grid, params, cfg, RolloutMode.ULTRA, rng=rng, oracle=oracle_from_windows(windows), obstacles=cohort.obstacles
        )

    for wid, target in truth.items():
        scores["deterministic"].append(displacement_errors(det.positions(wid), target))
        scores["standard"].append(min_of_k(samples[wid], target))
        scores["ultra"].append(displacement_errors(ultra.positions(wid), target))
    return scores


def evaluate_protocols(
    cohorts: Sequence[Cohort],
    grid: Optional[SceneGrid],
    params: ModelParams,
    cfg: NspConfig,
    seed: int = 0,
    threads: int = 1,
) -> ProtocolReport:
    """
    Score the same windows under the three protocols

    deterministic: one alpha-free rollout toward the first sampled goal;
    standard: min over goal_samples stochastic rollouts, one per sampled goal;
    ultra: per-step selection of the residual closest to the ground truth.
    Cohort c draws from its own stream seeded with (seed, c).
    """
    def run(index: int):
        return _cohort_protocols(cohorts[index], grid, params, cfg, np.random.default_rng([seed, index]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(cohorts))))
    else:
        results = [run(i) for i in range(len(cohorts))]

    merged: Dict[str, List[Tuple[float, float]]] = defaultdict(list)
    for scores in results:
        for name, values in scores.items():
            merged[name].extend(values)

    def summary(name: str) -> ProtocolScore:
        values = np.asarray(merged[name]).reshape(-1, 2)
        if len(values) == 0:
            return ProtocolScore(ade=0.0, fde=0.0, windows=0)
        return ProtocolScore(ade=float(values[:, 0].mean()), fde=float(values[:, 1].mean()), windows=len(values))

    report = ProtocolReport(deterministic=summary("deterministic"), standard=summary("standard"), ultra=summary("ultra"))
    logger.info(
        f"ADE/FDE det {report.deterministic.ade:.3f}/{report.deterministic.fde:.3f}, "
        f"standard {report.standard.ade:.3f}/{report.standard.fde:.3f}, "
        f"ultra {report.ultra.ade:.3f}/{report.ultra.fde:.3f}"
    )
    return report


# -- file scoring ------------------------------------------------------------

def _window_key(track_id: str, first_frame: int) -> Tuple[str, str, int]:
    """(window key, agent id, sample) of a predicted track; plain agent ids form a single sample"""
    if "#" in track_id and "@" in track_id:
        agent, start, sample = parse_prediction_id(track_id)
        return f"{agent}@{start}", agent, sample
    return f"{track_id}@{first_frame}", track_id, 0


def score_files(
    pred_path: PathLike,
    truth_path: PathLike,
    homography: Optional[Homography] = None,
    collision_radius: float = 15.0,
) -> ScoreReport:
    """
    Score a prediction file against ground truth

    Predicted tracks are matched to the truth by (agent, frame) and grouped into
    windows; ADE/FDE are min-of-K over the samples of a window and then averaged.
    With a homography both sides are projected to world units first. The
    collision rate counts sample-0 predictions that share a frame span.
    """
    truth_tracks = {t.agent_id: t for t in load_trajectories(truth_path)}
    truth_lookup = {agent: {r[0]: (r[1], r[2]) for r in t.records} for agent, t in truth_tracks.items()}

    samples: Dict[str, List[np.ndarray]] = defaultdict(list)
    targets: Dict[str, np.ndarray] = {}
    spans: Dict[Tuple[int, ...], List[np.ndarray]] = defaultdict(list)
    for track in load_trajectories(pred_path):
        frames = track.frame_ids()
        key, agent, sample = _window_key(track.agent_id, frames[0])
        if agent not in truth_lookup:
            raise ParseError(f"predicted agent '{agent}' has no ground-truth track")
        missing = [f for f in frames if f not in truth_lookup[agent]]
        if missing:
            raise ShapeMismatchError(f"no ground truth for agent '{agent}' at frames {missing[:5]}")
        pred = track.positions()
        target = np.array([truth_lookup[agent][f] for f in frames], dtype=np.float64)
        if homography is not None:
            pred = apply_homography(homography, pred)
            target = apply_homography(homography, target)
        if key in targets and targets[key].shape != target.shape:
            raise ShapeMismatchError(f"samples of window {key} cover different frames")
        targets[key] = target
        samples[key].append(pred)
        if sample == 0:
            spans[tuple(frames)].append(pred)

    if not samples:
        raise EmptySampleSetError(f"no predictions in {pred_path}")

    records = []
    for key in sorted(samples):
        ade, fde = min_of_k(samples[key], targets[key])
        records.append(MetricRecord(window=key, samples=len(samples[key]), ade=ade, fde=fde))

    collisions, pairs = 0, 0
    spec = CollisionSpec(radius=collision_radius)
    for group in spans.values():
        if len(group) < 2:
            continue
        collisions += collision_count(np.stack(group), spec)
        pairs += len(group) * (len(group) - 1) // 2

    return ScoreReport(
        records=records,
        ade=float(np.mean([r.ade for r in records])),
        fde=float(np.mean([r.fde for r in records])),
        collision_rate=collisions / pairs if pairs else None,
        units="world" if homography is not None else "px",
    )
