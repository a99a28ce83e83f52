"""
Pydantic Models
Domain types shared across the package and their validation
"""

from datetime import datetime, timezone
from enum import IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .exceptions import (
    GoalMismatchError,
    InvalidLabelError,
    NonFiniteValueError,
    NonMonotoneFramesError,
    NonUniformFramesError,
    ShapeMismatchError,
    SingularHomographyError,
    WrongFrameCountError,
)

Vec2 = Tuple[float, float]

WINDOW_LEN = 20
OBSERVED_LEN = 8


class AgentState(BaseModel):
    """Position and velocity of one agent at one time step"""

    model_config = ConfigDict(frozen=True)

    p: Vec2 = Field(..., description="Position (px)")
    v: Vec2 = Field(..., description="Velocity (px/s)")

    def position(self) -> np.ndarray:
        return np.array(self.p, dtype=np.float64)

    def velocity(self) -> np.ndarray:
        return np.array(self.v, dtype=np.float64)


class TrajectoryWindow(BaseModel):
    """A 20-frame sample of one agent: 8 observed frames, 12 to predict"""

    model_config = ConfigDict(frozen=True)

    agent_id: str
    frames: List[AgentState]
    frame_ids: List[int] = Field(default_factory=list, description="Source frame ids, uniformly spaced")
    observed_len: int = OBSERVED_LEN
    goal: Vec2
    dt: float = 0.4

    @property
    def start_frame(self) -> int:
        return self.frame_ids[0] if self.frame_ids else 0

    @property
    def frame_step(self) -> int:
        return self.frame_ids[1] - self.frame_ids[0] if len(self.frame_ids) > 1 else 1

    @property
    def window_id(self) -> str:
        return f"{self.agent_id}@{self.start_frame}"

    def positions(self) -> np.ndarray:
        return np.array([f.p for f in self.frames], dtype=np.float64).reshape(-1, 2)

    def velocities(self) -> np.ndarray:
        return np.array([f.v for f in self.frames], dtype=np.float64).reshape(-1, 2)

    def goal_array(self) -> np.ndarray:
        return np.array(self.goal, dtype=np.float64)

    def frame_id(self, index: int) -> int:
        return self.start_frame + index * self.frame_step


def validate_window(w: TrajectoryWindow, window_len: int = WINDOW_LEN, observed_len: int = OBSERVED_LEN) -> None:
    """
    Check every TrajectoryWindow invariant

    Raises:
        WrongFrameCountError: frame count or observed length is wrong
        NonFiniteValueError: a position, velocity or the goal is NaN/inf
        GoalMismatchError: goal differs from the last frame position
        NonUniformFramesError: frame ids are not uniformly increasing
    """
    if len(w.frames) != window_len:
        raise WrongFrameCountError(f"window {w.agent_id} has {len(w.frames)} frames, expected {window_len}")
    if w.observed_len != observed_len:
        raise WrongFrameCountError(f"window {w.agent_id} observes {w.observed_len} frames, expected {observed_len}")

    positions, velocities, goal = w.positions(), w.velocities(), w.goal_array()
    if not (np.isfinite(positions).all() and np.isfinite(velocities).all() and np.isfinite(goal).all()):
        raise NonFiniteValueError(f"window {w.agent_id} contains non-finite values")
    if not np.allclose(goal, positions[-1], rtol=0.0, atol=1e-9):
        raise GoalMismatchError(f"window {w.agent_id}: goal {tuple(goal)} != last frame {tuple(positions[-1])}")

    if w.frame_ids:
        if len(w.frame_ids) != window_len:
            raise NonUniformFramesError(f"window {w.agent_id} has {len(w.frame_ids)} frame ids")
        steps = np.diff(np.asarray(w.frame_ids))
        if steps[0] <= 0 or not np.all(steps == steps[0]):
            raise NonUniformFramesError(f"window {w.agent_id} frame ids are not uniformly spaced")


class CellClass(IntEnum):
    WALKABLE = 0
    UNWALKABLE = 1
    WEAK_OBSTACLE = 2


class SceneGrid(BaseModel):
    """Per-pixel class labels; cell (row, col) is centred at pixel (x=col, y=row)"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    cells: np.ndarray

    @model_validator(mode="after")
    def _check_cells(self) -> "SceneGrid":
        cells = np.asarray(self.cells)
        if cells.size != self.height * self.width:
            raise ShapeMismatchError(f"grid has {cells.size} cells, expected {self.height}x{self.width}")
        valid = np.isin(cells, [c.value for c in CellClass])
        if not valid.all():
            bad = np.unique(cells[~valid])
            raise InvalidLabelError(f"invalid cell labels {bad.tolist()}")
        object.__setattr__(self, "cells", cells.reshape(self.height, self.width).astype(np.int8))
        return self

    @classmethod
    def empty(cls, height: int, width: int) -> "SceneGrid":
        """All-walkable grid"""
        return cls(height=height, width=width, cells=np.zeros((height, width), dtype=np.int8))

    def count(self, label: CellClass) -> int:
        return int(np.count_nonzero(self.cells == label))


class ViewField(BaseModel):
    """Forward square with one corner at the agent and its diagonal along the heading"""

    model_config = ConfigDict(frozen=True)

    origin: Vec2
    heading: Vec2
    side: float = Field(..., gt=0)

    @field_validator("heading")
    @classmethod
    def _unit_heading(cls, value: Vec2) -> Vec2:
        if abs(np.hypot(*value) - 1.0) > 1e-9:
            raise ValueError("heading must have unit norm")
        return value


class Homography(BaseModel):
    """3x3 matrix mapping homogeneous pixel coordinates to world coordinates"""

    model_config = ConfigDict(frozen=True)

    matrix: List[List[float]]

    @model_validator(mode="after")
    def _check_invertible(self) -> "Homography":
        h = np.asarray(self.matrix, dtype=np.float64)
        if h.shape != (3, 3):
            raise ShapeMismatchError(f"homography must be 3x3, got {h.shape}")
        if abs(np.linalg.det(h)) <= 1e-12:
            raise SingularHomographyError("homography is not invertible")
        return self

    def as_array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=np.float64)


class RawTrack(BaseModel):
    """All (frame_id, x, y) records of one agent, ordered by frame"""

    agent_id: str
    records: List[Tuple[int, float, float]]

    @field_validator("records")
    @classmethod
    def _strictly_increasing(cls, records: List[Tuple[int, float, float]]) -> List[Tuple[int, float, float]]:
        for prev, cur in zip(records, records[1:]):
            if cur[0] <= prev[0]:
                raise NonMonotoneFramesError(f"frame {cur[0]} does not follow frame {prev[0]}")
        return records

    def frame_ids(self) -> List[int]:
        return [r[0] for r in self.records]

    def positions(self) -> np.ndarray:
        return np.array([(r[1], r[2]) for r in self.records], dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.records)


class CollisionSpec(BaseModel):
    """Agent disc radius and the frame range over which collisions count"""

    radius: float = Field(15.0, gt=0, description="0.2 m in metric scenes, 15 px in pixel scenes")
    interval: Optional[Tuple[int, int]] = Field(None, description="Half-open frame index range [start, stop)")


class CheckpointEntry(BaseModel):
    """One named tensor in a checkpoint manifest"""

    name: str
    shape: List[int]
    offset: int = Field(..., ge=0, description="Offset in float64 elements from the start of the data block")


class CheckpointManifest(BaseModel):
    version: int
    config: Dict[str, object] = Field(default_factory=dict)
    entries: List[CheckpointEntry]


class ErrorRecord(BaseModel):
    """Machine-parsable error line printed by the command line"""

    error: str = Field(..., description="Error code")
    message: str = Field(..., description="Human-readable error message")
    timestamp: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


class MetricRecord(BaseModel):
    """One line of the evaluation output"""

    window: str
    samples: int = Field(..., ge=1)
    ade: float = Field(..., ge=0)
    fde: float = Field(..., ge=0)


class EpochRecord(BaseModel):
    """One line of the training metric log"""

    stage: str
    epoch: int = Field(..., ge=0)
    loss: float
    batches: int = Field(..., ge=0)
    learning_rate: float = Field(..., gt=0)


class Scenario(BaseModel):
    """Initial states and goals of a generated crowd"""

    states: List[AgentState]
    goals: List[Vec2]

    @model_validator(mode="after")
    def _aligned(self) -> "Scenario":
        if len(self.states) != len(self.goals):
            raise ShapeMismatchError(f"{len(self.states)} states but {len(self.goals)} goals")
        return self


class ProtocolScore(BaseModel):
    ade: float = Field(..., ge=0)
    fde: float = Field(..., ge=0)
    windows: int = Field(..., ge=0)


class ProtocolReport(BaseModel):
    """Mean errors of one model under the three sampling protocols"""

    deterministic: ProtocolScore
    standard: ProtocolScore
    ultra: ProtocolScore


class ScoreReport(BaseModel):
    """Result of scoring a prediction file against ground truth"""

    records: List[MetricRecord]
    ade: float = Field(..., ge=0)
    fde: float = Field(..., ge=0)
    collision_rate: Optional[float] = Field(None, ge=0, le=1)
    units: str = "px"
