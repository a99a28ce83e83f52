"""
Data IO
Trajectory, scene-grid, homography and checkpoint files; windowing and cohort grouping
"""

import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .config import NspConfig
from .exceptions import (
    CheckpointError,
    DegenerateProjectionError,
    IoError,
    ParseError,
)
from .models import (
    AgentState,
    CheckpointEntry,
    CheckpointManifest,
    Homography,
    RawTrack,
    SceneGrid,
    TrajectoryWindow,
)
from .networks import ModelParams

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "NSPCKPT"
CHECKPOINT_VERSION = 1

PathLike = Union[str, Path]
TrajectoryRow = Tuple[int, str, float, float]


@dataclass
class Cohort:
    """Windows sharing one frame span, plus the other agents seen at those frames"""

    windows: List[TrajectoryWindow]
    obstacles: Dict[int, List[AgentState]] = field(default_factory=dict)

    @property
    def start_frame(self) -> int:
        return self.windows[0].start_frame

    def __len__(self) -> int:
        return len(self.windows)


def _read_lines(path: PathLike) -> List[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(f"Cannot read '{path}': {e}") from e


def _atomic_write(path: PathLike, payload: bytes) -> None:
    """Write to a temp file next to `path`, then rename over it"""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        if tmp.exists():
            try:
                tmp.unlink()
            except OSError:
                pass
        raise IoError(f"Cannot write '{path}': {e}") from e


# -- trajectories ------------------------------------------------------------

def _parse_frame(token: str) -> int:
    value = float(token)
    if not value.is_integer():
        raise ValueError(f"frame id '{token}' is not an integer")
    return int(value)


def load_trajectories(path: PathLike) -> List[RawTrack]:
    """
    Parse `frame_id agent_id x y` rows (tab or space separated)

    Blank lines and lines starting with `#` are skipped.

    Args:
        path: Trajectory file

    Returns:
        One RawTrack per agent, records sorted by frame, agents in order of first appearance
    """
    grouped: Dict[str, List[Tuple[int, float, float]]] = defaultdict(list)
    for number, raw in enumerate(_read_lines(path), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields 'frame agent x y', got {len(parts)}", line=number)
        try:
            frame, x, y = _parse_frame(parts[0]), float(parts[2]), float(parts[3])
        except ValueError as e:
            raise ParseError(str(e), line=number) from e
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ParseError("non-finite coordinate", line=number)
        grouped[parts[1]].append((frame, x, y))

    tracks = [RawTrack(agent_id=agent, records=sorted(records)) for agent, records in grouped.items()]
    logger.info(f"Loaded {len(tracks)} tracks from {path}")
    return tracks


def _velocities(positions: np.ndarray, dt: float, previous: Optional[np.ndarray] = None) -> np.ndarray:
    """Backward differences; the first frame uses `previous` when known, else a forward difference"""
    vel = np.empty_like(positions)
    vel[1:] = (positions[1:] - positions[:-1]) / dt
    if previous is not None:
        vel[0] = (positions[0] - previous) / dt
    elif len(positions) > 1:
        vel[0] = vel[1]
    else:
        vel[0] = 0.0
    return vel


def window_split(
    tracks: Sequence[RawTrack],
    stride: int = 20,
    dt: float = 0.4,
    window_len: int = 20,
    observed_len: int = 8,
) -> List[TrajectoryWindow]:
    """
    Cut every track into contiguous window_len-record slices

    Slices start every `stride` records; incomplete tails and slices with
    non-uniform frame ids are skipped.

    Args:
        tracks: Parsed tracks
        stride: Records between consecutive window starts
        dt: Seconds per frame step
        window_len: Frames per window
        observed_len: Observed frames per window

    Returns:
        Windows in track order, then start order
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    windows: List[TrajectoryWindow] = []
    skipped = 0
    for track in tracks:
        frames = np.asarray(track.frame_ids())
        positions = track.positions()
        for start in range(0, len(track) - window_len + 1, stride):
            ids = frames[start:start + window_len]
            steps = np.diff(ids)
            if not np.all(steps == steps[0]):
                skipped += 1
                continue
            previous = None
            if start > 0 and frames[start] - frames[start - 1] == steps[0]:
                previous = positions[start - 1]
            pos = positions[start:start + window_len]
            vel = _velocities(pos, dt, previous)
            windows.append(
                TrajectoryWindow(
                    agent_id=track.agent_id,
                    frames=[AgentState(p=tuple(p), v=tuple(v)) for p, v in zip(pos.tolist(), vel.tolist())],
                    frame_ids=ids.tolist(),
                    observed_len=observed_len,
                    goal=tuple(pos[-1].tolist()),
                    dt=dt,
                )
            )
    if skipped:
        logger.warning(f"Skipped {skipped} slices with non-uniform frame ids")
    logger.debug(f"Split {len(tracks)} tracks into {len(windows)} windows")
    return windows


def dynamic_obstacles(
    tracks: Sequence[RawTrack], windows: Sequence[TrajectoryWindow], dt: float
) -> Dict[int, List[AgentState]]:
    """
    States of agents outside a cohort at each frame index of its span

    Returns:
        Frame index -> agent states, ordered by agent id; indices without agents are omitted
    """
    if not windows:
        return {}
    members = {w.agent_id for w in windows}
    ref = windows[0]
    lookup = {ref.frame_id(k): k for k in range(len(ref.frames))}
    obstacles: Dict[int, List[Tuple[str, AgentState]]] = defaultdict(list)
    for track in tracks:
        if track.agent_id in members:
            continue
        records = track.records
        for i, (frame, x, y) in enumerate(records):
            k = lookup.get(frame)
            if k is None:
                continue
            if i > 0:
                prev = records[i - 1]
                v = ((x - prev[1]) / dt, (y - prev[2]) / dt)
            elif i + 1 < len(records):
                nxt = records[i + 1]
                v = ((nxt[1] - x) / dt, (nxt[2] - y) / dt)
            else:
                v = (0.0, 0.0)
            obstacles[k].append((track.agent_id, AgentState(p=(x, y), v=v)))
    return {k: [s for _, s in sorted(items, key=lambda item: item[0])] for k, items in sorted(obstacles.items())}


def group_cohorts(
    windows: Sequence[TrajectoryWindow], tracks: Optional[Sequence[RawTrack]] = None, dt: float = 0.4
) -> List[Cohort]:
    """Group windows by frame span; with `tracks`, attach the other agents as dynamic obstacles"""
    spans: Dict[Tuple[int, int], List[TrajectoryWindow]] = defaultdict(list)
    for w in windows:
        spans[(w.start_frame, w.frame_step)].append(w)
    cohorts = []
    for key in sorted(spans):
        members = spans[key]
        obstacles = dynamic_obstacles(tracks, members, dt) if tracks else {}
        cohorts.append(Cohort(windows=members, obstacles=obstacles))
    return cohorts


def load_cohorts(path: PathLike, cfg: NspConfig, stride: int = 20) -> Tuple[List[RawTrack], List[Cohort]]:
    """Tracks of one trajectory file and its windows grouped into cohorts"""
    tracks = load_trajectories(path)
    windows = window_split(tracks, stride, cfg.dt, cfg.window_len, cfg.obs_len)
    return tracks, group_cohorts(windows, tracks, cfg.dt)


def write_trajectories(path: PathLike, rows: Iterable[TrajectoryRow]) -> int:
    """
    Write `frame_id<TAB>agent_id<TAB>x<TAB>y` lines atomically

    Floats are written with repr so that reloading is exact.

    Returns:
        Number of rows written
    """
    lines = [f"{int(frame)}\t{agent}\t{float(x)!r}\t{float(y)!r}" for frame, agent, x, y in rows]
    _atomic_write(path, ("\n".join(lines) + "\n" if lines else "").encode("utf-8"))
    logger.info(f"Wrote {len(lines)} trajectory rows to {path}")
    return len(lines)


def prediction_id(window_id: str, sample: int) -> str:
    return f"{window_id}#{sample}"


def parse_prediction_id(value: str) -> Tuple[str, int, int]:
    """Split `<agent>@<start_frame>#<sample>` into (agent, start_frame, sample)"""
    try:
        window_id, sample = value.rsplit("#", 1)
        agent, start = window_id.rsplit("@", 1)
        return agent, int(start), int(sample)
    except ValueError as e:
        raise ParseError(f"malformed prediction id '{value}'") from e


def write_jsonl(path: PathLike, records: Iterable[dict]) -> int:
    lines = [json.dumps(r) for r in records]
    _atomic_write(path, ("\n".join(lines) + "\n" if lines else "").encode("utf-8"))
    return len(lines)


# -- coordinates -------------------------------------------------------------

def apply_homography(
    H: Union[Homography, np.ndarray], point, direction: str = "pixel_to_world"
) -> np.ndarray:
    """
    Map one point (2,) or many points (N, 2) through H, or through H^-1 for world_to_pixel

    Raises:
        DegenerateProjectionError: homogeneous w below 1e-12 in magnitude
    """
    matrix = H.as_array() if isinstance(H, Homography) else np.asarray(H, dtype=np.float64)
    if direction == "world_to_pixel":
        matrix = np.linalg.inv(matrix)
    elif direction != "pixel_to_world":
        raise ValueError(f"unknown direction '{direction}'")
    pts = np.asarray(point, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    homog = np.column_stack([flat, np.ones(len(flat))]) @ matrix.T
    w = homog[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateProjectionError("point maps to infinity")
    return (homog[:, :2] / w[:, None]).reshape(pts.shape)


def load_homography(path: PathLike) -> Homography:
    """Three lines of three whitespace-separated floats"""
    rows = []
    for number, raw in enumerate(_read_lines(path), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 3 values, got {len(parts)}", line=number)
        try:
            rows.append([float(x) for x in parts])
        except ValueError as e:
            raise ParseError(str(e), line=number) from e
    if len(rows) != 3:
        raise ParseError(f"expected 3 rows, got {len(rows)}")
    return Homography(matrix=rows)


# -- scene grids -------------------------------------------------------------

def load_scene_grid(path: PathLike) -> SceneGrid:
    """
    Parse a scene grid: `height width`, then height rows of width labels in {0, 1, 2}

    Raises:
        ParseError: malformed header or row length mismatch
        InvalidLabelError: label outside {0, 1, 2}
    """
    lines = [(n, raw.strip()) for n, raw in enumerate(_read_lines(path), start=1) if raw.strip()]
    if not lines:
        raise ParseError("empty scene grid file")
    number, header = lines[0]
    try:
        height, width = (int(x) for x in header.split())
    except ValueError as e:
        raise ParseError("header must be 'height width'", line=number) from e
    if height < 1 or width < 1:
        raise ParseError("grid dimensions must be positive", line=number)
    body = lines[1:]
    if len(body) != height:
        raise ParseError(f"expected {height} rows, got {len(body)}")
    rows = []
    for number, line in body:
        try:
            row = [int(x) for x in line.split()]
        except ValueError as e:
            raise ParseError(str(e), line=number) from e
        if len(row) != width:
            raise ParseError(f"expected {width} labels, got {len(row)}", line=number)
        rows.append(row)
    grid = SceneGrid(height=height, width=width, cells=np.asarray(rows))
    logger.info(f"Loaded {height}x{width} scene grid from {path}")
    return grid


def save_scene_grid(grid: SceneGrid, path: PathLike) -> None:
    lines = [f"{grid.height} {grid.width}"] + [" ".join(str(int(c)) for c in row) for row in grid.cells]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(params: ModelParams, cfg: NspConfig, path: PathLike) -> None:
    """
    Header line `NSPCKPT <version> <manifest bytes>`, JSON manifest, then little-endian float64 data
    """
    entries, blocks, offset = [], [], 0
    for name, value in sorted(params.state_dict().items()):
        entries.append(CheckpointEntry(name=name, shape=list(value.shape), offset=offset))
        blocks.append(np.ascontiguousarray(value, dtype="<f8").reshape(-1))
        offset += value.size
    manifest = CheckpointManifest(version=CHECKPOINT_VERSION, config=cfg.model_dump(), entries=entries)
    manifest_bytes = manifest.model_dump_json().encode("utf-8")
    header = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {len(manifest_bytes)}\n".encode("ascii")
    data = np.concatenate(blocks).tobytes() if blocks else b""
    _atomic_write(path, header + manifest_bytes + data)
    logger.info(f"Saved checkpoint with {len(entries)} tensors to {path}")


def load_checkpoint(path: PathLike) -> Tuple[ModelParams, NspConfig]:
    """Rebuild the networks from the embedded config and fill in the stored tensors"""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read checkpoint '{path}': {e}") from e

    newline = raw.find(b"\n")
    try:
        magic, version, length = raw[:newline].decode("ascii").split()
        version, length = int(version), int(length)
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"'{path}' has no checkpoint header") from e
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint {magic} v{version}")

    start = newline + 1
    try:
        manifest = CheckpointManifest.model_validate_json(raw[start:start + length])
        cfg = NspConfig(**manifest.config)
    except ValidationError as e:
        raise CheckpointError(f"invalid checkpoint manifest: {e}") from e

    data_bytes = raw[start + length:]
    if len(data_bytes) % 8:
        raise CheckpointError("truncated checkpoint data")
    data = np.frombuffer(data_bytes, dtype="<f8")
    state = {}
    for entry in manifest.entries:
        size = int(np.prod(entry.shape)) if entry.shape else 1
        if entry.offset + size > data.size:
            raise CheckpointError(f"tensor {entry.name} runs past the end of the data")
        state[entry.name] = data[entry.offset:entry.offset + size].reshape(entry.shape).astype(np.float64)

    params = ModelParams.build(cfg, seed=None)
    params.load_state_dict(state)
    logger.info(f"Loaded checkpoint {path}")
    return params, cfg

