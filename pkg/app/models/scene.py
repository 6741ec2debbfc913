"""Synthetic scene description: map, agents, references, anchors and safety field."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Tuple

import numpy as np

from app.exceptions import InvalidTrajectory
from app.models.trajectory import Trajectory, Waypoint

MAX_AGENT_SPEED = 30.0


class Template(str, Enum):
    STRAIGHT = 'Straight'
    LEFT_TURN = 'LeftTurn'
    RIGHT_TURN = 'RightTurn'
    OBSTACLE = 'Obstacle'
    MERGE = 'Merge'

    @classmethod
    def parse(cls, name: str) -> 'Template':
        for template in cls:
            if template.value.lower() == str(name).lower():
                return template
        raise ValueError(f"unknown template {name!r}; expected one of {[t.value for t in cls]}")


@dataclass(frozen=True)
class AgentState:
    position: Waypoint
    velocity: Tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidTrajectory(f"agent radius must be > 0, got {self.radius}")
        if float(np.hypot(*self.velocity)) > MAX_AGENT_SPEED:
            raise InvalidTrajectory(f"agent speed exceeds {MAX_AGENT_SPEED} m/s")

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))

    def to_dict(self) -> dict:
        return {
            'position': [self.position.x, self.position.y],
            'velocity': [float(v) for v in self.velocity],
            'radius': self.radius,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'AgentState':
        return cls(Waypoint(*map(float, data['position'])), tuple(map(float, data['velocity'])),
                   float(data['radius']))


@dataclass(frozen=True, eq=False)
class Polyline:
    """A lane centerline or a road boundary in meters"""
    points: np.ndarray
    kind: str = 'centerline'

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64, copy=True)
        if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
            raise InvalidTrajectory(f"polyline needs >= 2 points, got shape {points.shape}")
        points.setflags(write=False)
        object.__setattr__(self, 'points', points)

    @property
    def segments(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.points[:-1], self.points[1:]

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'points': self.points.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> 'Polyline':
        return cls(np.array(data['points'], dtype=np.float64), data.get('kind', 'centerline'))


@dataclass(frozen=True, eq=False)
class SafetyField:
    """Distance-to-nearest-obstacle grid.

    grid[i, j] is the value at origin + (i * cell_size, j * cell_size);
    the first axis runs along x.
    """
    origin: Waypoint
    cell_size: float
    grid: np.ndarray

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.float64, copy=True)
        if grid.ndim != 2 or min(grid.shape) < 1:
            raise ValueError(f"safety grid must be 2D, got shape {grid.shape}")
        if np.any(grid < 0):
            raise ValueError("safety grid values must be >= 0")
        grid.setflags(write=False)
        object.__setattr__(self, 'grid', grid)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    def cell_center(self, i: int, j: int) -> np.ndarray:
        return np.array([self.origin.x + i * self.cell_size, self.origin.y + j * self.cell_size])

    def to_fractional_index(self, points: np.ndarray) -> np.ndarray:
        """(N, 2) meters -> (N, 2) fractional grid indices, unclamped"""
        origin = self.origin.as_array()
        return (np.asarray(points, dtype=np.float64) - origin) / self.cell_size

    def to_dict(self) -> dict:
        return {
            'origin': [self.origin.x, self.origin.y],
            'cell': self.cell_size,
            'rows': self.grid.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SafetyField':
        return cls(Waypoint(*map(float, data['origin'])), float(data['cell']),
                   np.array(data['rows'], dtype=np.float64))


@dataclass(frozen=True)
class ManeuverSpec:
    """Parameters the template gt was synthesised from.

    Distances are arc lengths along the ego path in meters; `turn_angle` is
    signed (left positive) in radians.
    """
    template: Template
    speed: float
    onset: float = 0.0
    turn_angle: float = 0.0
    turn_radius: float = 0.0
    lateral_target: float = 0.0
    lateral_length: float = 0.0
    lateral_bias: float = 0.0

    def to_dict(self) -> dict:
        data = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != 'template'}
        data['template'] = self.template.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ManeuverSpec':
        values = {k: float(v) for k, v in data.items() if k != 'template'}
        return cls(Template.parse(data['template']), **values)


@dataclass(frozen=True, eq=False)
class Scene:
    """The conditioning context of one planning problem"""
    scene_id: str
    maneuver: ManeuverSpec
    map_polylines: Tuple[Polyline, ...]
    agents: Tuple[AgentState, ...]
    goal: Waypoint
    gt: Trajectory
    reference_gts: Tuple[Trajectory, ...]
    safety_field: SafetyField
    anchors: Tuple[Trajectory, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.reference_gts:
            raise InvalidTrajectory("a scene needs at least one reference gt")
        if any(ref.horizon != self.gt.horizon for ref in self.reference_gts):
            raise InvalidTrajectory("reference gts must share T with the gt")

    @property
    def template(self) -> Template:
        return self.maneuver.template

    @property
    def centerlines(self) -> Tuple[Polyline, ...]:
        return tuple(p for p in self.map_polylines if p.kind == 'centerline')

    @property
    def boundaries(self) -> Tuple[Polyline, ...]:
        return tuple(p for p in self.map_polylines if p.kind == 'boundary')

    def with_anchors(self, anchors) -> 'Scene':
        return replace(self, anchors=tuple(anchors))

    def with_references(self, references) -> 'Scene':
        return replace(self, reference_gts=tuple(references))

    def to_dict(self) -> dict:
        def traj(t: Trajectory) -> list:
            return t.points.tolist()

        return {
            'id': self.scene_id,
            'dt': self.gt.dt,
            'maneuver': self.maneuver.to_dict(),
            'polylines': [p.to_dict() for p in self.map_polylines],
            'agents': [a.to_dict() for a in self.agents],
            'goal': [self.goal.x, self.goal.y],
            'gt': traj(self.gt),
            'refs': [traj(r) for r in self.reference_gts],
            'anchors': [traj(a) for a in self.anchors],
            'safety': self.safety_field.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'Scene':
        dt = float(data.get('dt', 0.5))

        def traj(points) -> Trajectory:
            return Trajectory(np.array(points, dtype=np.float64), dt)

        return cls(
            scene_id=str(data['id']),
            maneuver=ManeuverSpec.from_dict(data['maneuver']),
            map_polylines=tuple(Polyline.from_dict(p) for p in data['polylines']),
            agents=tuple(AgentState.from_dict(a) for a in data['agents']),
            goal=Waypoint(*map(float, data['goal'])),
            gt=traj(data['gt']),
            reference_gts=tuple(traj(r) for r in data['refs']),
            anchors=tuple(traj(a) for a in data.get('anchors', [])),
            safety_field=SafetyField.from_dict(data['safety']),
        )
