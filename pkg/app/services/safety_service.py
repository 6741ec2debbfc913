"""Distance-to-obstacle fields and their queries."""
import logging
from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from app.models.scene import AgentState, Polyline, SafetyField
from app.models.trajectory import Trajectory, Waypoint

logger = logging.getLogger(__name__)

NO_OBSTACLE_DISTANCE = 1e6

Bounds = Tuple[float, float, float, float]


def point_segment_distance(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Distance from every point to its nearest segment.

    Args:
        points: (N, 2) query points.
        starts: (S, 2) segment start points.
        ends: (S, 2) segment end points.

    Returns:
        (N,) distances.
    """
    points = np.asarray(points, dtype=np.float64)
    seg = ends - starts
    seg_len2 = np.maximum(np.einsum('sd,sd->s', seg, seg), 1e-18)
    rel = points[:, None, :] - starts[None, :, :]
    u = np.clip(np.einsum('nsd,sd->ns', rel, seg) / seg_len2, 0.0, 1.0)
    closest = starts[None, :, :] + u[..., None] * seg[None, :, :]
    return np.min(np.linalg.norm(points[:, None, :] - closest, axis=-1), axis=1)


def polyline_distance(points: np.ndarray, polylines: Iterable[Polyline]) -> np.ndarray:
    polylines = list(polylines)
    if not polylines:
        return np.full(len(points), NO_OBSTACLE_DISTANCE)
    return np.min([point_segment_distance(points, *p.segments) for p in polylines], axis=0)


def grid_centers(bounds: Bounds, cell_size: float) -> Tuple[np.ndarray, np.ndarray]:
    x_min, x_max, y_min, y_max = bounds
    nx = int(np.floor((x_max - x_min) / cell_size + 1e-9)) + 1
    ny = int(np.floor((y_max - y_min) / cell_size + 1e-9)) + 1
    return x_min + cell_size * np.arange(nx), y_min + cell_size * np.arange(ny)


def build_safety_field(agents: Sequence[AgentState], boundaries: Sequence[Polyline],
                       bounds: Bounds, cell_size: float) -> SafetyField:
    """Exact brute-force distance from every cell center to the nearest obstacle.

    Obstacles are agent disks and boundary segments. With no obstacles every
    cell holds NO_OBSTACLE_DISTANCE.
    """
    if not cell_size > 0:
        raise ValueError(f"cell_size must be > 0, got {cell_size}")
    x_min, x_max, y_min, y_max = bounds
    if not (x_max > x_min and y_max > y_min):
        raise ValueError(f"degenerate bounds {bounds}")

    xs, ys = grid_centers(bounds, cell_size)
    gx, gy = np.meshgrid(xs, ys, indexing='ij')
    cells = np.stack([gx.ravel(), gy.ravel()], axis=1)

    distance = np.full(len(cells), NO_OBSTACLE_DISTANCE)
    for agent in agents:
        to_center = np.linalg.norm(cells - agent.position.as_array(), axis=1)
        distance = np.minimum(distance, np.maximum(to_center - agent.radius, 0.0))
    for boundary in boundaries:
        distance = np.minimum(distance, point_segment_distance(cells, *boundary.segments))

    return SafetyField(Waypoint(float(x_min), float(y_min)), float(cell_size),
                       distance.reshape(len(xs), len(ys)))


def bilinear_sample(grid: np.ndarray, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sample a (nx, ny) or (nx, ny, C) grid at (N, 2) fractional indices.

    Indices outside the grid are clamped to the border; the second return
    value marks them.
    """
    index = np.atleast_2d(np.asarray(index, dtype=np.float64))
    upper = np.array(grid.shape[:2], dtype=np.float64) - 1.0
    clamped = np.any((index < 0.0) | (index > upper), axis=1)
    coords = np.clip(index, 0.0, upper).T
    if grid.ndim == 2:
        return map_coordinates(grid, coords, order=1, mode='nearest'), clamped
    channels = [map_coordinates(grid[..., c], coords, order=1, mode='nearest') for c in range(grid.shape[2])]
    return np.stack(channels, axis=-1), clamped


def query_safety_many(field: SafetyField, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear field values at (N, 2) points plus a mask of clamped queries"""
    values, clamped = bilinear_sample(field.grid, field.to_fractional_index(np.atleast_2d(points)))
    if np.any(clamped):
        logger.debug("clamped %d safety queries outside the field", int(clamped.sum()))
    return values, clamped


def query_safety_flagged(field: SafetyField, p: Waypoint) -> Tuple[float, bool]:
    """Clearance at one point and whether it was clamped to the field border"""
    values, clamped = query_safety_many(field, p.as_array()[None, :])
    return float(values[0]), bool(clamped[0])


def query_safety(field: SafetyField, p: Waypoint) -> float:
    return query_safety_flagged(field, p)[0]


def violation_mask(traj: Trajectory, field: SafetyField, d_thresh: float) -> np.ndarray:
    """Waypoints whose interpolated clearance is strictly below d_thresh"""
    values, _ = query_safety_many(field, traj.points)
    return values < d_thresh
