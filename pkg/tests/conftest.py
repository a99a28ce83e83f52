"""
Shared fixtures
"""

from typing import Callable, Sequence

import numpy as np
import pytest

from nsp.config import NspConfig
from nsp.models import AgentState, TrajectoryWindow


def build_window(
    agent_id: str,
    positions: Sequence[Sequence[float]],
    start: int = 0,
    step: int = 10,
    dt: float = 0.4,
) -> TrajectoryWindow:
    """Window from positions; velocities by backward difference, the first one forward"""
    pos = np.asarray(positions, dtype=np.float64)
    vel = np.empty_like(pos)
    vel[1:] = (pos[1:] - pos[:-1]) / dt
    vel[0] = vel[1]
    return TrajectoryWindow(
        agent_id=agent_id,
        frames=[AgentState(p=tuple(p), v=tuple(v)) for p, v in zip(pos.tolist(), vel.tolist())],
        frame_ids=[start + k * step for k in range(len(pos))],
        goal=tuple(pos[-1].tolist()),
        dt=dt,
    )


@pytest.fixture
def small_cfg() -> NspConfig:
    """Tiny smooth networks so finite differences stay cheap"""
    return NspConfig(embed_dim=4, lstm_hidden=5, mlp_hidden=6, latent_dim=3, hidden_activation="tanh")


@pytest.fixture
def window_factory() -> Callable[..., TrajectoryWindow]:
    return build_window


@pytest.fixture
def straight_window() -> Callable[..., TrajectoryWindow]:
    """Uniform motion p0 + k * dt * v over 20 frames"""

    def make(agent_id: str, p0, v, dt: float = 0.4, start: int = 0) -> TrajectoryWindow:
        p0, v = np.asarray(p0, dtype=np.float64), np.asarray(v, dtype=np.float64)
        positions = [p0 + k * dt * v for k in range(20)]
        return build_window(agent_id, positions, start=start, dt=dt)

    return make
