"""
Simulation
Synthetic training windows from a fixed social force model, and open-ended crowd simulation
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor, no_grad
from .config import NspConfig
from .cvae import cvae_sample
from .data_io import Cohort, TrajectoryRow
from .evaluation import collision_rate
from .forces import ForceDiagnostics, Kinematics, net_acceleration
from .models import AgentState, CollisionSpec, Scenario, SceneGrid, TrajectoryWindow
from .networks import AgentMemory, ModelParams
from .rollout import agent_rng, semi_implicit_step

logger = logging.getLogger(__name__)

BASELINES = ("none", "sfm", "goal-only")
HAND_TUNED_TAU = 0.5
HAND_TUNED_K = 25.0
EVAL_FPS = 2.5


# -- synthetic windows -------------------------------------------------------

def _simulate_span(
    starts: np.ndarray,
    velocities: np.ndarray,
    goals: np.ndarray,
    cfg: NspConfig,
    params: Optional[ModelParams],
    grid: Optional[SceneGrid],
    noise: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the predicted part of a window for all agents at once; returns positions and velocities (N, steps+1, 2)"""
    M, T, dt = cfg.first_step, cfg.last_index, cfg.dt
    n = len(starts)
    states = [Kinematics(Tensor(starts[i]), Tensor(velocities[i])) for i in range(n)]
    pos = [[starts[i]] for i in range(n)]
    vel = [[velocities[i]] for i in range(n)]
    for step, t in enumerate(range(M, T)):
        forces = []
        for i in range(n):
            neighbors = [states[j] for j in range(n) if j != i]
            forces.append(net_acceleration(states[i], goals[i], neighbors, grid, params, cfg, t, T))
        for i in range(n):
            states[i] = semi_implicit_step(states[i], forces[i].total, noise[i, step], dt)
            pos[i].append(states[i].p.data.copy())
            vel[i].append(states[i].v.data.copy())
    return np.asarray(pos), np.asarray(vel)


def synthetic_cohorts(
    cfg: NspConfig,
    n_cohorts: int,
    rng: np.random.Generator,
    agents_per_cohort: int = 1,
    speed_range: Tuple[float, float] = (20.0, 40.0),
    noise: float = 0.0,
    params: Optional[ModelParams] = None,
    grid: Optional[SceneGrid] = None,
    extent: float = 400.0,
) -> List[Cohort]:
    """
    Windows generated by the force model with constant tau and k

    Each agent walks a straight line for the observed frames, heading up to 60
    degrees away from its goal, and then follows the model. Without noise the
    goals are solved so that the simulated final position equals the goal, so
    a deterministic rollout with the generating parameters reproduces every
    window. With noise, a Gaussian residual of that std (px) is added at each
    predicted step and the goal is the final noisy position.

    Args:
        cfg: Hyper-parameters; fixed_tau (and fixed_k with several agents) make the generator
        n_cohorts: Number of cohorts
        rng: Sampling stream
        agents_per_cohort: Agents sharing each frame span
        speed_range: Initial speed range (px/s)
        noise: Residual std per predicted step (px)
        params: Parameters for whatever fixed_tau/fixed_k leave learned
        grid: Scene classes, or None
        extent: Side of the square the agents start in (px)

    Returns:
        Cohorts of valid windows
    """
    if cfg.fixed_tau is None:
        raise ValueError("synthetic data needs a constant fixed_tau")
    M, T, dt = cfg.first_step, cfg.last_index, cfg.dt
    steps = T - M
    cohorts = []
    with no_grad():
        for c in range(n_cohorts):
            n = agents_per_cohort
            origin = rng.uniform(0.0, extent, size=(n, 2))
            heading_angle = rng.uniform(0.0, 2 * math.pi, size=n)
            speed = rng.uniform(*speed_range, size=n)
            v0 = np.column_stack([np.cos(heading_angle), np.sin(heading_angle)]) * speed[:, None]
            observed = origin[:, None, :] + np.arange(M + 1)[None, :, None] * dt * v0[:, None, :]
            offset = heading_angle + rng.uniform(-math.pi / 3, math.pi / 3, size=n)
            reach = speed * dt * steps
            goals = observed[:, -1] + np.column_stack([np.cos(offset), np.sin(offset)]) * reach[:, None]
            residuals = rng.normal(0.0, noise, size=(n, steps, 2)) if noise > 0 else np.zeros((n, steps, 2))

            def run(g):
                return _simulate_span(observed[:, -1], v0, g, cfg, params, grid, residuals)

            pos, vel = run(goals)
            if noise == 0.0:
                # p_T depends on the goal with slope c per axis; solve p_T(g) = g
                shifted, _ = run(goals + 1.0)
                slope = shifted[:, -1] - pos[:, -1]
                for _ in range(50):
                    gap = pos[:, -1] - goals
                    if np.abs(gap).max() < 1e-10:
                        break
                    goals = goals + gap / np.where(np.abs(1.0 - slope) > 1e-9, 1.0 - slope, 1.0)
                    pos, vel = run(goals)

            windows = []
            start_frame = c * 100
            for i in range(n):
                positions = np.concatenate([observed[i, :-1], pos[i]])
                velocities = np.concatenate([np.repeat(v0[i][None], M, axis=0), vel[i]])
                windows.append(
                    TrajectoryWindow(
                        agent_id=f"syn{c}_{i}",
                        frames=[AgentState(p=tuple(p), v=tuple(v)) for p, v in zip(positions.tolist(), velocities.tolist())],
                        frame_ids=list(range(start_frame, start_frame + cfg.window_len)),
                        observed_len=cfg.obs_len,
                        goal=tuple(positions[-1].tolist()),
                        dt=dt,
                    )
                )
            cohorts.append(Cohort(windows=windows))
    logger.info(f"Generated {n_cohorts} synthetic cohorts of {agents_per_cohort} agents")
    return cohorts


def hand_tuned(cfg: NspConfig) -> NspConfig:
    """The constant-parameter social force model"""
    return cfg.model_copy(update={"fixed_tau": HAND_TUNED_TAU, "fixed_k": HAND_TUNED_K})


# -- crowd simulation --------------------------------------------------------

@dataclass
class SimulationResult:
    agent_ids: List[str]
    trajectories: np.ndarray
    fps: float
    horizons: List[int]
    diagnostics: ForceDiagnostics = field(default_factory=ForceDiagnostics)

    def rows(self) -> List[TrajectoryRow]:
        """Trajectory-file rows, frame by frame"""
        out = []
        for f in range(self.trajectories.shape[1]):
            for agent, traj in zip(self.agent_ids, self.trajectories):
                out.append((f, agent, float(traj[f, 0]), float(traj[f, 1])))
        return out


def simulate_scene(
    grid: Optional[SceneGrid],
    params: Optional[ModelParams],
    cfg: NspConfig,
    scenario: Scenario,
    seconds: float = 30.0,
    fps: float = 10.0,
    mode: str = "det",
    baseline: str = "none",
    rng: Optional[np.random.Generator] = None,
) -> SimulationResult:
    """
    Simulate a crowd from initial states toward goals

    Agent n must arrive at frame ceil(distance / (speed * dt)); after that
    frame it stays where it arrived with zero velocity and keeps repelling
    the others. The Goal-Network memory of each agent starts fresh at frame 0.
    In sto mode a residual is drawn every 1/2.5 s of simulated time,
    conditioned on positions spaced by the same interval.

    Args:
        grid: Scene classes
        params: Learned parameters
        cfg: Hyper-parameters; dt is replaced by 1/fps
        scenario: Initial states and goals
        seconds: Simulated duration
        fps: Frames per second
        mode: det or sto
        baseline: none, sfm (hand-tuned constants) or goal-only (no repulsion)
        rng: Stream for sto mode

    Returns:
        SimulationResult with (agents, seconds * fps, 2) trajectories
    """
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline '{baseline}'")
    if mode not in ("det", "sto"):
        raise ValueError(f"unknown mode '{mode}'")
    dt = 1.0 / fps
    run_cfg = hand_tuned(cfg) if baseline == "sfm" else cfg
    run_cfg = run_cfg.model_copy(update={"dt": dt})
    repulsion = baseline != "goal-only"
    frames = int(round(seconds * fps))
    stride = max(1, int(round(fps / EVAL_FPS)))
    n = len(scenario.states)
    ids = [f"agent{i}" for i in range(n)]
    base_seed = int(rng.integers(0, 2 ** 62)) if rng is not None else 0
    streams = {wid: agent_rng(base_seed, wid) for wid in ids}
    diagnostics = ForceDiagnostics()

    goals = [np.asarray(g, dtype=np.float64) for g in scenario.goals]
    states = [Kinematics(Tensor(s.position()), Tensor(s.velocity())) for s in scenario.states]
    horizons = []
    for s, g in zip(scenario.states, goals):
        speed = float(np.linalg.norm(s.velocity()))
        distance = float(np.linalg.norm(g - s.position()))
        horizons.append(max(1, math.ceil(distance / (speed * dt))) if speed > 0 else 1)
    memories = [AgentMemory.fresh(params.goal_net) if run_cfg.fixed_tau is None else None for _ in range(n)]

    # Positions before frame 0 are extrapolated backwards along the initial velocity
    history_len = run_cfg.obs_len * stride
    history = [
        [s.position() - s.velocity() * dt * (history_len - k) for k in range(history_len)] + [s.position()]
        for s in scenario.states
    ]
    trajectories = np.zeros((n, frames, 2))
    trajectories[:, 0] = [s.position() for s in scenario.states]

    with no_grad():
        for f in range(frames - 1):
            forces = {}
            for i in range(n):
                if f >= horizons[i]:
                    continue
                neighbors = [states[j] for j in range(n) if j != i]
                forces[i] = net_acceleration(
                    states[i], goals[i], neighbors, grid, params, run_cfg, f, horizons[i],
                    memory=memories[i], use_collision=repulsion, use_env=repulsion, diagnostics=diagnostics,
                )
            for i in range(n):
                if i not in forces:
                    continue
                alpha = np.zeros(2)
                if mode == "sto" and f % stride == 0:
                    past = np.asarray(history[i][-1::-stride][:run_cfg.obs_len][::-1])
                    alpha = cvae_sample(params.cvae, past, run_cfg.sigma_latent, streams[ids[i]])
                states[i] = semi_implicit_step(states[i], forces[i].total, alpha, dt)
                if f + 1 >= horizons[i]:
                    states[i] = Kinematics(states[i].p, Tensor(np.zeros(2)))
            for i in range(n):
                trajectories[i, f + 1] = states[i].p.data
                history[i].append(states[i].p.data.copy())

    if diagnostics.degenerate:
        logger.warning(f"{diagnostics.degenerate} degenerate force evaluations replaced by zero")
    logger.info(f"Simulated {n} agents for {frames} frames at {fps:g} FPS ({baseline} baseline, {mode})")
    return SimulationResult(agent_ids=ids, trajectories=trajectories, fps=fps, horizons=horizons, diagnostics=diagnostics)


def subsample(trajectories: np.ndarray, fps: float, start_s: float, stop_s: float, target_fps: float = EVAL_FPS) -> np.ndarray:
    """Frames in [start_s, stop_s) taken every fps / target_fps frames"""
    stride = max(1, int(round(fps / target_fps)))
    first, last = int(round(start_s * fps)), int(round(stop_s * fps))
    return trajectories[:, first:last:stride]


def interval_collision_rates(
    trajectories: np.ndarray,
    fps: float,
    radius: float,
    intervals: Sequence[Tuple[float, float]] = ((0.0, 8.0), (4.0, 12.0), (8.0, 16.0)),
    scored_frames: int = 12,
) -> Dict[Tuple[float, float], float]:
    """
    Collision rate of each interval, subsampled to 2.5 FPS with only the last scored_frames counted
    """
    rates = {}
    for start_s, stop_s in intervals:
        window = subsample(trajectories, fps, start_s, stop_s)
        if window.shape[1] == 0:
            raise ValueError(f"interval {start_s}-{stop_s}s lies outside the simulation")
        rates[(start_s, stop_s)] = collision_rate(window[:, -scored_frames:], CollisionSpec(radius=radius))
    return rates
