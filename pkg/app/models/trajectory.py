"""Trajectory-space value types and primitives.

Trajectories are stored as absolute ego-frame positions in a (T, 2) float64
array; the displacement form is a view produced on demand.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from app.exceptions import InvalidScale, InvalidTrajectory

SCENE_BOUND = 200.0
DEFAULT_DT = 0.5


def _frozen(points: np.ndarray) -> np.ndarray:
    points = np.array(points, dtype=np.float64, copy=True)
    points.setflags(write=False)
    return points


@dataclass(frozen=True)
class Waypoint:
    """An ego-frame position in meters"""
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise InvalidTrajectory(f"non-finite waypoint ({self.x}, {self.y})")
        if abs(self.x) > SCENE_BOUND or abs(self.y) > SCENE_BOUND:
            raise InvalidTrajectory(f"waypoint ({self.x}, {self.y}) outside the {SCENE_BOUND} m scene bound")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """T waypoints sampled every `dt` seconds.

    Values outside the scene bound are rejected rather than clamped.
    """
    points: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 1:
            raise InvalidTrajectory(f"expected a (T, 2) array, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise InvalidTrajectory("trajectory contains NaN or Inf")
        if np.any(np.abs(points) > SCENE_BOUND):
            raise InvalidTrajectory(f"trajectory leaves the {SCENE_BOUND} m scene bound")
        if not self.dt > 0:
            raise InvalidTrajectory(f"dt must be > 0, got {self.dt}")
        object.__setattr__(self, 'points', _frozen(points))

    @property
    def horizon(self) -> int:
        return self.points.shape[0]

    @property
    def waypoints(self) -> Tuple[Waypoint, ...]:
        return tuple(Waypoint(float(x), float(y)) for x, y in self.points)

    def with_points(self, points: np.ndarray) -> Trajectory:
        return Trajectory(points, self.dt)

    def displacements(self) -> Trajectory:
        """First differences; the inverse of cumulative_sum"""
        return Trajectory(np.diff(self.points, axis=0, prepend=np.zeros((1, 2))), self.dt)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.points, other.points)

    def __hash__(self) -> int:
        return hash((self.dt, self.points.tobytes()))

    @classmethod
    def from_waypoints(cls, waypoints: Iterable[Waypoint], dt: float = DEFAULT_DT) -> Trajectory:
        return cls(np.array([[w.x, w.y] for w in waypoints], dtype=np.float64), dt)


@dataclass(frozen=True)
class TrajectorySet:
    """M mode-indexed trajectories of one scene"""
    modes: Tuple[Trajectory, ...]
    scene_id: str

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise InvalidTrajectory("a trajectory set needs at least one mode")
        horizon, dt = modes[0].horizon, modes[0].dt
        if any(m.horizon != horizon or m.dt != dt for m in modes):
            raise InvalidTrajectory("all modes of a set must share T and dt")
        object.__setattr__(self, 'modes', modes)

    def __len__(self) -> int:
        return len(self.modes)

    def __iter__(self):
        return iter(self.modes)

    def __getitem__(self, index: int) -> Trajectory:
        return self.modes[index]

    @property
    def horizon(self) -> int:
        return self.modes[0].horizon

    @property
    def dt(self) -> float:
        return self.modes[0].dt

    def stack(self) -> np.ndarray:
        """(M, T, 2) array of all modes"""
        return np.stack([m.points for m in self.modes])

    @classmethod
    def from_array(cls, array: np.ndarray, scene_id: str, dt: float = DEFAULT_DT) -> TrajectorySet:
        return cls(tuple(Trajectory(points, dt) for points in np.asarray(array)), scene_id)

    def to_records(self) -> List[dict]:
        return [to_record(traj, self.scene_id, mode) for mode, traj in enumerate(self.modes)]


TrajectoryLike = Union[Trajectory, np.ndarray, Sequence[Sequence[float]]]


def _points(traj: TrajectoryLike) -> Tuple[np.ndarray, float]:
    if isinstance(traj, Trajectory):
        return traj.points, traj.dt
    points = np.asarray(traj, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise InvalidTrajectory("trajectory contains NaN or Inf")
    return points, DEFAULT_DT


def cumulative_sum(deltas: TrajectoryLike) -> Trajectory:
    """Convert per-step displacements to absolute positions"""
    points, dt = _points(deltas)
    return Trajectory(np.cumsum(points, axis=0), dt)


def normalize(traj: Trajectory, scale: float) -> Trajectory:
    if not scale > 0:
        raise InvalidScale(f"scale must be > 0, got {scale}")
    return Trajectory(traj.points / scale, traj.dt)


def denormalize(traj: Trajectory, scale: float) -> Trajectory:
    if not scale > 0:
        raise InvalidScale(f"scale must be > 0, got {scale}")
    return Trajectory(traj.points * scale, traj.dt)


def flatten(traj: TrajectoryLike) -> np.ndarray:
    """Interleaved (x_1, y_1, ..., x_T, y_T).

    The l2 distance of two flattened trajectories is the trajectory distance
    used by the matching loss and the diversity reward.
    """
    points, _ = _points(traj)
    return points.reshape(-1).copy()


def to_record(traj: Trajectory, scene_id: str, mode: int) -> dict:
    return {
        'scene_id': scene_id,
        'mode': int(mode),
        'dt': float(traj.dt),
        'points': [[float(x), float(y)] for x, y in traj.points],
    }


def from_record(record: dict) -> Tuple[str, int, Trajectory]:
    """Decode one JSONL record into (scene_id, mode, trajectory)"""
    return (
        str(record['scene_id']),
        int(record['mode']),
        Trajectory(np.array(record['points'], dtype=np.float64), float(record['dt'])),
    )
