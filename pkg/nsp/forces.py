"""
Forces
Goal attraction, pairwise repulsion and environment repulsion, and their sum
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .autograd import ArrayLike, Tensor, as_tensor
from .config import NspConfig
from .exceptions import (
    CoincidentAgentsError,
    CoincidentObstacleError,
    NonPositiveTauError,
    TimeExhaustedError,
)
from .geometry import neighborhood, obstacle_centroids, view_field
from .models import SceneGrid
from .networks import AgentMemory, ModelParams, collision_k, goal_tau

logger = logging.getLogger(__name__)

_ZERO2 = np.zeros(2)


class Kinematics(NamedTuple):
    """Differentiable counterpart of AgentState"""

    p: Tensor
    v: Tensor


def as_kinematics(state) -> Kinematics:
    if isinstance(state, Kinematics):
        return state
    return Kinematics(as_tensor(state.p), as_tensor(state.v))


@dataclass(frozen=True)
class ForceBreakdown:
    f_goal: Tensor
    f_col: Tensor
    f_env: Tensor
    total: Tensor

    def as_dict(self) -> dict:
        return {
            "f_goal": self.f_goal.data.tolist(),
            "f_col": self.f_col.data.tolist(),
            "f_env": self.f_env.data.tolist(),
        }


@dataclass
class ForceDiagnostics:
    """Counts forces replaced by zero because positions coincided"""

    degenerate: int = 0


def desired_velocity(p: ArrayLike, p_goal: ArrayLike, t: int, T: int, dt: float) -> Tensor:
    """Velocity that reaches p_goal exactly at frame T"""
    if t >= T:
        raise TimeExhaustedError(f"no time left: t={t}, T={T}")
    return (as_tensor(p_goal) - as_tensor(p)) / ((T - t) * dt)


def goal_force(tau: ArrayLike, v_des: ArrayLike, v: ArrayLike) -> Tensor:
    tau = as_tensor(tau)
    if np.any(tau.data <= 0):
        raise NonPositiveTauError(f"tau must be positive, got {tau.data}")
    return (as_tensor(v_des) - as_tensor(v)) / tau


def collision_force(k_nj: ArrayLike, r_nj: ArrayLike, r_col: float) -> Tensor:
    """
    Negative gradient of U = r_col * k * exp(-|r| / r_col)

    Args:
        k_nj: Repulsion strength (>= 0)
        r_nj: p_n - p_j, pointing from the neighbour to the agent
        r_col: Neighbourhood radius

    Returns:
        k * exp(-|r| / r_col) * r / |r|
    """
    r = as_tensor(r_nj)
    dist = r.norm()
    if dist.item() == 0.0:
        raise CoincidentAgentsError("agents share a position")
    return as_tensor(k_nj) * (-dist / r_col).exp() * r / dist


def env_force(
    k_env: ArrayLike,
    p: ArrayLike,
    p_obs: Optional[ArrayLike],
    p_wobs: Optional[ArrayLike],
    lambda_weak: float,
) -> Tensor:
    """Repulsion k_env / |d| along d = p - centroid, weak obstacles scaled by lambda_weak"""
    p = as_tensor(p)
    force = Tensor(_ZERO2)
    for centroid, weight in ((p_obs, 1.0), (p_wobs, lambda_weak)):
        if centroid is None:
            continue
        d = p - as_tensor(centroid)
        dist_sq = (d * d).sum()
        if dist_sq.item() == 0.0:
            raise CoincidentObstacleError("agent sits on an obstacle centroid")
        force = force + as_tensor(k_env) * weight * d / dist_sq
    return force


def net_acceleration(
    state,
    goal: ArrayLike,
    neighbors: Sequence,
    grid: Optional[SceneGrid],
    params: Optional[ModelParams],
    cfg: NspConfig,
    t: int,
    T: int,
    tau: Optional[Tensor] = None,
    memory: Optional[AgentMemory] = None,
    use_collision: bool = True,
    use_env: bool = True,
    diagnostics: Optional[ForceDiagnostics] = None,
) -> ForceBreakdown:
    """
    Sum of goal, collision and environment forces acting on one agent

    Args:
        state: The agent (AgentState or Kinematics)
        goal: Goal position p^T
        neighbors: Every other agent present at t; the sector picks Omega
        grid: Scene classes, or None for an open scene
        params: Learned parameters (unused parts may be None when fixed_tau/fixed_k are set)
        cfg: Hyper-parameters
        t: Current frame index
        T: Goal frame index
        tau: Relaxation time already computed for this step
        memory: Goal-Network recurrent state, advanced when tau is not given
        use_collision: Include F_col
        use_env: Include F_env
        diagnostics: Counter for degenerate pairs

    Returns:
        ForceBreakdown
    """
    state = as_kinematics(state)
    diagnostics = diagnostics if diagnostics is not None else ForceDiagnostics()

    if tau is None:
        if cfg.fixed_tau is not None:
            tau = Tensor(cfg.fixed_tau)
        else:
            tau = goal_tau(params.goal_net, state, goal, cfg, memory)
    f_goal = goal_force(tau, desired_velocity(state.p, goal, t, T, cfg.dt), state.v)

    f_col = Tensor(_ZERO2)
    if use_collision and neighbors:
        others = [as_kinematics(n) for n in neighbors]
        for j in neighborhood(state, others, cfg.omega, cfg.r_col):
            k = Tensor(cfg.fixed_k) if cfg.fixed_k is not None else collision_k(params.collision_net, state, others[j], cfg)
            try:
                f_col = f_col + collision_force(k, state.p - others[j].p, cfg.r_col)
            except CoincidentAgentsError:
                diagnostics.degenerate += 1
                logger.debug(f"Coincident agents at {state.p.data.tolist()}; collision force set to zero")

    f_env = Tensor(_ZERO2)
    if use_env and grid is not None:
        p_obs, p_wobs = obstacle_centroids(grid, view_field(state, cfg.r_env))
        k_env = params.k_env if params is not None else Tensor(0.0)
        # Each centroid term degenerates on its own; the other one is kept
        for kind, centroid, weak in (("obstacle", p_obs, None), ("weak obstacle", None, p_wobs)):
            if centroid is None and weak is None:
                continue
            try:
                f_env = f_env + env_force(k_env, state.p, centroid, weak, cfg.lambda_weak)
            except CoincidentObstacleError:
                diagnostics.degenerate += 1
                logger.debug(f"Agent on {kind} centroid at {state.p.data.tolist()}; that term set to zero")

    return ForceBreakdown(f_goal=f_goal, f_col=f_col, f_env=f_env, total=f_goal + f_col + f_env)
