"""
Rollout
Semi-implicit integration of the force model over a cohort of 20-frame windows
"""

import logging
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .autograd import ArrayLike, Tensor, as_tensor
from .config import NspConfig
from .cvae import cvae_sample
from .exceptions import MissingOracleError, NonFiniteInputError
from .forces import ForceBreakdown, ForceDiagnostics, Kinematics, as_kinematics, net_acceleration
from .models import AgentState, SceneGrid, TrajectoryWindow, validate_window
from .networks import AgentMemory, ModelParams, goal_tau

logger = logging.getLogger(__name__)


class RolloutMode(str, Enum):
    DETERMINISTIC = "det"
    STOCHASTIC = "sto"
    ULTRA = "ultra"


@dataclass
class AgentPrediction:
    """Predicted frames of one window and the forces behind them"""

    window_id: str
    agent_id: str
    frame_ids: List[int]
    positions: List[Tensor] = field(default_factory=list)
    forces: List[ForceBreakdown] = field(default_factory=list)
    warmup_frames: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([p.data for p in self.positions], dtype=np.float64).reshape(-1, 2)


@dataclass
class RolloutResult:
    predictions: Dict[str, AgentPrediction]
    diagnostics: ForceDiagnostics

    @property
    def window_ids(self) -> List[str]:
        return list(self.predictions)

    def positions(self, window_id: str) -> np.ndarray:
        return self.predictions[window_id].as_array()

    def force_records(self) -> List[dict]:
        records = []
        for pred in self.predictions.values():
            for frame_id, breakdown in zip(pred.frame_ids, pred.forces):
                records.append({"agent": pred.agent_id, "window": pred.window_id, "frame": frame_id, **breakdown.as_dict()})
        return records


def semi_implicit_step(state, accel: ArrayLike, alpha: ArrayLike, dt: float):
    """
    v' = v + dt * accel, then p' = p + dt * v' + alpha

    Returns an AgentState for AgentState input, Kinematics otherwise.
    """
    plain = isinstance(state, AgentState)
    kin = as_kinematics(state)
    accel, alpha = as_tensor(accel), as_tensor(alpha)
    for name, value in (("p", kin.p), ("v", kin.v), ("accel", accel), ("alpha", alpha)):
        if not np.all(np.isfinite(value.data)):
            raise NonFiniteInputError(f"non-finite {name} in integrator step")
    v_next = kin.v + accel * dt
    p_next = kin.p + v_next * dt + alpha
    if plain:
        return AgentState(p=tuple(p_next.data.tolist()), v=tuple(v_next.data.tolist()))
    return Kinematics(p_next, v_next)


def agent_rng(base_seed: int, key: str) -> np.random.Generator:
    """Stream owned by one agent, independent of cohort order"""
    return np.random.default_rng([base_seed, zlib.crc32(key.encode("utf-8"))])


def oracle_from_windows(windows: Sequence[TrajectoryWindow]) -> Dict[str, np.ndarray]:
    return {w.window_id: w.positions() for w in windows}


def rollout_window(
    agents: Sequence[TrajectoryWindow],
    grid: Optional[SceneGrid],
    params: Optional[ModelParams],
    cfg: NspConfig,
    mode: Union[RolloutMode, str] = RolloutMode.DETERMINISTIC,
    rng: Optional[np.random.Generator] = None,
    oracle: Optional[Mapping[str, np.ndarray]] = None,
    goals: Optional[Mapping[str, ArrayLike]] = None,
    obstacles: Optional[Mapping[int, Sequence[AgentState]]] = None,
    use_collision: bool = True,
    use_env: bool = True,
) -> RolloutResult:
    """
    Predict the last frames of every window in a cohort

    All agents share the frame span. The Goal-Network memory of each agent is
    warmed up on its observed frames; then, at every step, forces for all
    agents are computed from the states at t before any agent moves.

    Args:
        agents: Windows of the cohort
        grid: Scene classes, or None
        params: Learned parameters
        cfg: Hyper-parameters
        mode: det, sto or ultra
        rng: Sampling stream (sto/ultra)
        oracle: Ground-truth positions per window id, (20, 2), required in ultra mode
        goals: Goal overrides per window id (standard sampling)
        obstacles: Agents outside the cohort observed at frame index t
        use_collision: Include F_col
        use_env: Include F_env

    Returns:
        RolloutResult keyed by window id in input order
    """
    mode = RolloutMode(mode)
    if mode == RolloutMode.ULTRA and oracle is None:
        raise MissingOracleError("ultra-sampling needs ground-truth positions")
    for w in agents:
        validate_window(w, cfg.window_len, cfg.obs_len)

    M, T, dt = cfg.first_step, cfg.last_index, cfg.dt
    base_seed = int(rng.integers(0, 2 ** 62)) if rng is not None else 0
    needs_goal_net = cfg.fixed_tau is None
    diagnostics = ForceDiagnostics()

    # Fixed processing order: neighbour sums never depend on the caller's order
    cohort = sorted(agents, key=lambda w: w.window_id)
    ids = [w.window_id for w in cohort]
    goal = {w.window_id: as_tensor(goals[w.window_id] if goals and w.window_id in goals else w.goal_array()) for w in cohort}
    streams = {wid: agent_rng(base_seed, wid) for wid in ids}
    memories: Dict[str, Optional[AgentMemory]] = {}
    first_tau: Dict[str, Optional[Tensor]] = {}
    states: Dict[str, Kinematics] = {}
    history: Dict[str, List[np.ndarray]] = {}
    predictions: Dict[str, AgentPrediction] = {}

    for w in cohort:
        positions, velocities = w.positions(), w.velocities()
        memory, tau = None, None
        if needs_goal_net:
            memory = AgentMemory.fresh(params.goal_net)
            for k in range(M + 1):
                tau = goal_tau(params.goal_net, Kinematics(Tensor(positions[k]), Tensor(velocities[k])), goal[w.window_id], cfg, memory)
        memories[w.window_id] = memory
        first_tau[w.window_id] = tau
        states[w.window_id] = Kinematics(Tensor(positions[M]), Tensor(velocities[M]))
        history[w.window_id] = [positions[k] for k in range(M + 1)]
        predictions[w.window_id] = AgentPrediction(
            window_id=w.window_id,
            agent_id=w.agent_id,
            frame_ids=[w.frame_id(k) for k in range(M + 1, T + 1)],
            warmup_frames=memory.steps if memory is not None else 0,
        )

    for t in range(M, T):
        extra = [as_kinematics(s) for s in (obstacles or {}).get(t, [])]
        step_forces: Dict[str, ForceBreakdown] = {}
        for wid in ids:
            neighbors = [states[other] for other in ids if other != wid] + extra
            step_forces[wid] = net_acceleration(
                states[wid], goal[wid], neighbors, grid, params, cfg, t, T,
                tau=first_tau[wid] if t == M else None,
                memory=memories[wid],
                use_collision=use_collision,
                use_env=use_env,
                diagnostics=diagnostics,
            )

        for wid in ids:
            state, accel = states[wid], step_forces[wid].total
            alpha = np.zeros(2)
            if mode != RolloutMode.DETERMINISTIC:
                past = np.asarray(history[wid][-cfg.obs_len:])
                if mode == RolloutMode.STOCHASTIC:
                    alpha = cvae_sample(params.cvae, past, cfg.sigma_latent, streams[wid])
                else:
                    candidates = cvae_sample(params.cvae, past, cfg.sigma_latent, streams[wid], n=cfg.ultra_samples)
                    p_bar = state.p.data + dt * (state.v.data + dt * accel.data)
                    errors = np.linalg.norm(p_bar + candidates - oracle[wid][t + 1], axis=1)
                    alpha = candidates[int(np.argmin(errors))]
            states[wid] = semi_implicit_step(state, accel, alpha, dt)
            history[wid].append(states[wid].p.data.copy())
            predictions[wid].positions.append(states[wid].p)
            predictions[wid].forces.append(step_forces[wid])

    if diagnostics.degenerate:
        logger.warning(f"{diagnostics.degenerate} degenerate force evaluations replaced by zero")
    return RolloutResult(predictions={w.window_id: predictions[w.window_id] for w in agents}, diagnostics=diagnostics)
