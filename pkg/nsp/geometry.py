"""
Scene Geometry
Neighbourhood sectors and forward view fields that gate which agents and obstacle cells exert forces
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor
from .models import CellClass, SceneGrid, ViewField

_COS45 = math.sqrt(0.5)


def xy(value) -> np.ndarray:
    """Plain 2-vector from a tuple, array or Tensor"""
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def neighborhood(state, others: Sequence, omega: float, r_col: float) -> List[int]:
    """
    Indices of the agents inside the forward sector of `state`

    A neighbour qualifies when it lies within r_col and its bearing deviates
    from the velocity direction by at most omega. A stationary agent has no
    sector and gets the empty set.

    Args:
        state: Object with `p` and `v`
        others: Other agents (the caller excludes `state` itself)
        omega: Sector half-angle in (0, pi)
        r_col: Neighbourhood radius

    Returns:
        Sorted list of indices into `others`
    """
    p, v = xy(state.p), xy(state.v)
    speed = math.hypot(v[0], v[1])
    if speed == 0.0:
        return []
    heading = v / speed
    selected = []
    for j, other in enumerate(others):
        d = xy(other.p) - p
        dist = math.hypot(d[0], d[1])
        if dist > r_col:
            continue
        if dist == 0.0:
            # coincident: no bearing; the force layer reports the degeneracy
            selected.append(j)
            continue
        cos_angle = (d[0] * heading[0] + d[1] * heading[1]) / dist
        if math.acos(max(-1.0, min(1.0, cos_angle))) <= omega:
            selected.append(j)
    return selected


def view_field(state, r_env: float) -> Optional[ViewField]:
    """Forward square of side r_env; None for a stationary agent"""
    v = xy(state.v)
    speed = math.hypot(v[0], v[1])
    if speed == 0.0:
        return None
    p = xy(state.p)
    return ViewField(origin=(float(p[0]), float(p[1])), heading=(float(v[0] / speed), float(v[1] / speed)), side=r_env)


def _square_axes(field: ViewField) -> Tuple[np.ndarray, np.ndarray]:
    """Edge directions of the square: the heading rotated by -45 and +45 degrees"""
    hx, hy = field.heading
    u = np.array([_COS45 * (hx + hy), _COS45 * (hy - hx)])
    w = np.array([_COS45 * (hx - hy), _COS45 * (hx + hy)])
    return u, w


def in_view_field(field: ViewField, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Boolean mask of the points (N x 2) that lie inside the square"""
    u, w = _square_axes(field)
    rel = np.asarray(points, dtype=np.float64).reshape(-1, 2) - np.asarray(field.origin)
    a, b = rel @ u, rel @ w
    return (a >= -tol) & (a <= field.side + tol) & (b >= -tol) & (b <= field.side + tol)


def obstacle_centroids(grid: SceneGrid, field: Optional[ViewField]) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """
    Mean coordinate of the unwalkable and of the weak-obstacle cells in the view field

    Returns:
        Tuple (p_obs, p_wobs); either is None when no such cell is inside
    """
    if field is None:
        return None, None

    u, w = _square_axes(field)
    origin = np.asarray(field.origin)
    corners = np.stack([origin, origin + field.side * u, origin + field.side * w, origin + field.side * (u + w)])
    col_lo = max(int(math.floor(corners[:, 0].min())), 0)
    col_hi = min(int(math.ceil(corners[:, 0].max())), grid.width - 1)
    row_lo = max(int(math.floor(corners[:, 1].min())), 0)
    row_hi = min(int(math.ceil(corners[:, 1].max())), grid.height - 1)
    if col_lo > col_hi or row_lo > row_hi:
        return None, None

    window = grid.cells[row_lo:row_hi + 1, col_lo:col_hi + 1]
    rows, cols = np.nonzero(window != CellClass.WALKABLE)
    if rows.size == 0:
        return None, None
    centers = np.column_stack([cols + col_lo, rows + row_lo]).astype(np.float64)
    inside = in_view_field(field, centers)
    labels = window[rows, cols]

    result = []
    for label in (CellClass.UNWALKABLE, CellClass.WEAK_OBSTACLE):
        mask = inside & (labels == label)
        result.append(centers[mask].mean(axis=0) if mask.any() else None)
    return result[0], result[1]
