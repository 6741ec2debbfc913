import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans

from app.config import RunConfig
from app.exceptions import InsufficientData, InsufficientDiversity
from app.models.scene import AgentState, ManeuverSpec, Polyline, Scene, Template
from app.models.trajectory import Trajectory, Waypoint, flatten
from app.services.safety_service import build_safety_field, polyline_distance, query_safety_many
from app.utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

MIN_SPEED, MAX_SPEED = 5.0, 12.0
ROAD_BEHIND, ROAD_AHEAD = 10.0, 80.0
MERGE_LANE_OFFSET = 3.5
MIN_REFERENCE_GAP = 0.5
MAX_LATERAL_OFFSET = 1.5


def smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def path_points(maneuver: ManeuverSpec, s: np.ndarray, with_lateral: bool = True) -> np.ndarray:
    """Positions at arc lengths `s` along the maneuver's ego path.

    Turns run straight until `onset`, follow an arc of `turn_radius` through
    `turn_angle`, then continue straight. Lateral maneuvers (nudge, lane
    change) blend in `lateral_target` over `lateral_length` after `onset`.
    """
    s = np.asarray(s, dtype=np.float64)
    x = s.copy()
    y = np.full_like(s, maneuver.lateral_bias)

    angle = abs(maneuver.turn_angle)
    if angle > 0 and maneuver.turn_radius > 0:
        sign = np.sign(maneuver.turn_angle)
        radius = maneuver.turn_radius
        arc_end = maneuver.onset + radius * angle
        a = np.clip((s - maneuver.onset) / radius, 0.0, angle)
        on_arc = s > maneuver.onset
        x = np.where(on_arc, maneuver.onset + radius * np.sin(a), s)
        y = np.where(on_arc, maneuver.lateral_bias + sign * radius * (1.0 - np.cos(a)), y)
        beyond = np.maximum(s - arc_end, 0.0)
        x = x + beyond * np.cos(angle)
        y = y + sign * beyond * np.sin(angle)

    if with_lateral and maneuver.lateral_length > 0:
        blend = smoothstep((s - maneuver.onset) / maneuver.lateral_length)
        y = y + maneuver.lateral_target * blend
    return np.stack([x, y], axis=1)


def path_normals(maneuver: ManeuverSpec, s: np.ndarray) -> np.ndarray:
    """Unit left normals of the ego path at arc lengths `s`"""
    h = 1e-3
    tangent = path_points(maneuver, np.asarray(s) + h) - path_points(maneuver, np.asarray(s) - h)
    tangent /= np.maximum(np.linalg.norm(tangent, axis=1, keepdims=True), 1e-12)
    return np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)


def synthesize_gt(maneuver: ManeuverSpec, horizon: int, dt: float, speed_scale: float = 1.0,
                  lateral_offset: float = 0.0) -> Trajectory:
    """Sample the maneuver at `horizon` steps of `dt` seconds.

    speed_scale ramps the speed linearly from the maneuver speed to
    speed * speed_scale at the last step; lateral_offset is blended in along
    the path normal so the first waypoint stays close to the original.
    """
    k = np.arange(1, horizon + 1, dtype=np.float64)
    ramp = 1.0 + (speed_scale - 1.0) * k / horizon
    s = maneuver.speed * dt * np.cumsum(ramp)
    points = path_points(maneuver, s)
    if lateral_offset:
        weight = smoothstep(k / horizon)[:, None]
        points = points + lateral_offset * weight * path_normals(maneuver, s)
    return Trajectory(points, dt)


def heading_change(traj: Trajectory) -> float:
    """Heading of the last segment relative to the +x ego heading, in radians"""
    points = np.vstack([np.zeros((1, 2)), traj.points])
    step = points[-1] - points[-2]
    return float(np.arctan2(step[1], step[0]))


class SceneService:
    """
    Procedural generation of synthetic driving scenes.

    Each scene carries a template maneuver gt, K_ref corridor-constrained
    reference variants of it, surrounding agents placed off the gt path and
    the exact distance field over agents and road boundaries. Every generator
    is a pure function of its seed and the run configuration.
    """

    def __init__(self, config: RunConfig):
        self.config = config

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        c = self.config
        return c.x_min, c.x_max, c.y_min, c.y_max

    def corridor_half_width(self, template: Template) -> float:
        if template == Template.MERGE:
            return MERGE_LANE_OFFSET / 2.0 + 0.25
        return self.config.road_half_width - 0.5

    def _sample_maneuver(self, template: Template, rng: np.random.Generator) -> ManeuverSpec:
        c = self.config
        speed = float(rng.uniform(MIN_SPEED, MAX_SPEED))
        length = speed * c.dt * c.horizon

        if template == Template.STRAIGHT:
            return ManeuverSpec(template, speed, lateral_bias=float(rng.uniform(-0.3, 0.3)))

        if template in (Template.LEFT_TURN, Template.RIGHT_TURN):
            sign = 1.0 if template == Template.LEFT_TURN else -1.0
            budget = speed * c.dt * max(c.horizon - 1, 1)
            min_radius = c.road_half_width + 2.0
            if budget <= 0:
                return ManeuverSpec(template, speed)
            angle = float(np.deg2rad(rng.uniform(75.0, 105.0)))
            if angle * min_radius > budget:
                angle = 0.95 * budget / min_radius
            radius = float(rng.uniform(min_radius, max(min_radius, budget / angle)))
            onset = float(rng.uniform(0.0, max(budget - radius * angle, 0.0)))
            return ManeuverSpec(template, speed, onset=onset, turn_angle=sign * angle, turn_radius=radius)

        if template == Template.OBSTACLE:
            onset = float(rng.uniform(0.0, 0.2 * length))
            lateral_length = float(rng.uniform(0.3, 0.45) * length)
            return ManeuverSpec(template, speed, onset=onset, lateral_length=lateral_length,
                                lateral_target=float(rng.uniform(2.2, 2.8)))

        onset = float(rng.uniform(0.0, 0.3 * length))
        lateral_length = float(rng.uniform(0.4, 0.6) * length)
        return ManeuverSpec(template, speed, onset=onset, lateral_length=lateral_length,
                            lateral_target=MERGE_LANE_OFFSET)

    def _road(self, maneuver: ManeuverSpec) -> List[Polyline]:
        hw = self.config.road_half_width
        s = np.arange(-ROAD_BEHIND, ROAD_AHEAD + 1e-9, 1.0)
        base = ManeuverSpec(maneuver.template, maneuver.speed, onset=maneuver.onset,
                            turn_angle=maneuver.turn_angle, turn_radius=maneuver.turn_radius)
        center = path_points(base, s, with_lateral=False)
        normal = path_normals(base, s)

        if maneuver.template == Template.MERGE:
            lanes = [center, center + MERGE_LANE_OFFSET * normal]
            right = center - (MERGE_LANE_OFFSET / 2.0 + 0.75) * normal
            left = center + (MERGE_LANE_OFFSET * 1.5 + 0.75) * normal
        else:
            lanes = [center]
            right, left = center - hw * normal, center + hw * normal
        return ([Polyline(lane, 'centerline') for lane in lanes]
                + [Polyline(right, 'boundary'), Polyline(left, 'boundary')])

    def _template_agents(self, maneuver: ManeuverSpec, rng: np.random.Generator) -> List[AgentState]:
        length = maneuver.speed * self.config.dt * self.config.horizon
        if maneuver.template == Template.OBSTACLE:
            radius = 1.0
            s_obstacle = maneuver.onset + maneuver.lateral_length + float(rng.uniform(0.05, 0.25)) * length
            lateral = float(rng.uniform(-1.0, -0.3))
            position = Waypoint(float(s_obstacle), lateral)
            return [AgentState(position, (0.0, 0.0), radius)]
        if maneuver.template == Template.MERGE:
            s_lead = maneuver.onset + maneuver.lateral_length + float(rng.uniform(2.0, 8.0))
            return [AgentState(Waypoint(float(s_lead), 0.0), (float(rng.uniform(2.0, 5.0)), 0.0), 1.0)]
        return []

    def _surrounding_agents(self, maneuver: ManeuverSpec, gt: Trajectory,
                            rng: np.random.Generator) -> List[AgentState]:
        base = ManeuverSpec(maneuver.template, maneuver.speed, onset=maneuver.onset,
                            turn_angle=maneuver.turn_angle, turn_radius=maneuver.turn_radius)
        dense_gt = Polyline(np.vstack([np.zeros((1, 2)), gt.points]), 'centerline')
        length = maneuver.speed * self.config.dt * self.config.horizon
        agents = []
        wanted = int(rng.integers(1, 4))
        for _ in range(40 * wanted):
            if len(agents) == wanted:
                break
            s = float(rng.uniform(length + 5.0, length + 35.0))
            lateral = float(rng.uniform(-2.0, 2.0))
            radius = float(rng.uniform(0.8, 1.2))
            center = path_points(base, np.array([s]), with_lateral=False)
            center = center + lateral * path_normals(base, np.array([s]))
            if polyline_distance(center, [dense_gt])[0] < radius + 2.0 + MAX_LATERAL_OFFSET:
                continue
            if np.any(np.abs(center) > 150.0):
                continue
            heading = path_normals(base, np.array([s]))[0]
            speed = float(rng.uniform(0.0, 10.0))
            velocity = (float(heading[1] * speed), float(-heading[0] * speed))
            agents.append(AgentState(Waypoint(float(center[0, 0]), float(center[0, 1])), velocity, radius))
        return agents

    def generate_scene(self, rng_seed: int, template, scene_id: Optional[str] = None,
                       k_ref: Optional[int] = None) -> Scene:
        """Build one synthetic scene, deterministic given (seed, template)"""
        template = template if isinstance(template, Template) else Template.parse(template)
        c = self.config
        rng = make_rng(rng_seed, list(Template).index(template))

        maneuver = self._sample_maneuver(template, rng)
        gt = synthesize_gt(maneuver, c.horizon, c.dt)
        polylines = self._road(maneuver)
        agents = self._template_agents(maneuver, rng) + self._surrounding_agents(maneuver, gt, rng)
        field = build_safety_field(agents, [p for p in polylines if p.kind == 'boundary'],
                                   self.bounds, c.cell_size)

        scene = Scene(
            scene_id=scene_id or f"{template.value}-{rng_seed}",
            maneuver=maneuver,
            map_polylines=tuple(polylines),
            agents=tuple(agents),
            goal=Waypoint(float(gt.points[-1, 0]), float(gt.points[-1, 1])),
            gt=gt,
            reference_gts=(gt,),
            safety_field=field,
        )
        k = c.k_ref if k_ref is None else k_ref
        if k > 1:
            references = self.generate_reference_gts(scene, k, derive_seed(rng_seed, 1), strict=False)
            scene = scene.with_references(references)
        return scene

    def in_corridor(self, scene: Scene, traj: Trajectory) -> bool:
        distance = polyline_distance(traj.points, scene.centerlines)
        return bool(np.all(distance <= self.corridor_half_width(scene.template)))

    def is_safe(self, scene: Scene, traj: Trajectory) -> bool:
        values, _ = query_safety_many(scene.safety_field, traj.points)
        return bool(np.all(values >= self.config.d_thresh))

    def _reference_candidates(self, scene: Scene, rng: np.random.Generator) -> List[Trajectory]:
        c = self.config
        maneuver = scene.maneuver
        step = maneuver.speed * c.dt

        def shifted(steps: int) -> Trajectory:
            onset = max(maneuver.onset + steps * step, 0.0)
            return synthesize_gt(replace(maneuver, onset=onset), c.horizon, c.dt)

        def variant(lateral: float = 0.0, speed: float = 1.0) -> Trajectory:
            return synthesize_gt(maneuver, c.horizon, c.dt, speed_scale=speed, lateral_offset=lateral)

        candidates = [
            variant(lateral=MAX_LATERAL_OFFSET), variant(lateral=-MAX_LATERAL_OFFSET),
            variant(speed=1.3), variant(speed=0.7), shifted(2), shifted(-2),
            variant(lateral=0.75), variant(lateral=-0.75), variant(speed=1.15), variant(speed=0.85),
            shifted(1), shifted(-1),
        ]
        for _ in range(24):
            lateral = float(rng.uniform(-MAX_LATERAL_OFFSET, MAX_LATERAL_OFFSET))
            speed = float(rng.uniform(0.7, 1.3))
            candidates.append(variant(lateral=lateral, speed=speed))
        return candidates

    def generate_reference_gts(self, scene: Scene, k: int, rng_seed: int, strict: bool = True) -> List[Trajectory]:
        """
        Derive k kinematically smooth reference variants of the scene's gt.

        Variants differ in lateral offset (up to 1.5 m), terminal speed (up to
        30%) or maneuver onset (up to 2 steps). A variant is accepted when it
        stays in the drivable corridor, keeps clearance >= d_thresh everywhere
        and lies at least 0.5 m (flattened l2) from every accepted reference.

        Args:
            scene: Scene whose gt is perturbed
            k: Number of references, >= 1; k == 1 returns the gt alone
            rng_seed: Seed for the randomised candidates
            strict: Raise when fewer than k variants fit, else return what fits

        Returns:
            List[Trajectory]: gt first, then the accepted variants
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        accepted = [scene.gt]
        if k == 1:
            return accepted

        rng = make_rng(rng_seed)
        for candidate in self._reference_candidates(scene, rng):
            if len(accepted) == k:
                break
            if not (self.in_corridor(scene, candidate) and self.is_safe(scene, candidate)):
                continue
            gaps = [np.linalg.norm(flatten(candidate) - flatten(ref)) for ref in accepted]
            if min(gaps) >= MIN_REFERENCE_GAP:
                accepted.append(candidate)

        if len(accepted) < k:
            if strict:
                raise InsufficientDiversity(
                    f"scene {scene.scene_id}: only {len(accepted)} of {k} references fit the corridor")
            logger.info("scene %s: kept %d of %d requested references", scene.scene_id, len(accepted), k)
        return accepted

    def generate_corpus(self, n: int, seed: Optional[int] = None,
                        templates: Optional[Sequence[str]] = None) -> List[Scene]:
        """n scenes cycling through the template mix, with splitmix-derived per-scene seeds"""
        seed = self.config.seed if seed is None else seed
        templates = [Template.parse(t) for t in (templates or self.config.templates)]
        jobs = [(derive_seed(seed, i), templates[i % len(templates)], f"scene-{i:05d}") for i in range(n)]
        if self.config.workers > 1 and n > 1:
            with ProcessPoolExecutor(max_workers=self.config.workers) as pool:
                return list(pool.map(_generate_job, [self.config] * n, jobs))
        return [self.generate_scene(*job) for job in jobs]


def _generate_job(config: RunConfig, job: tuple) -> Scene:
    return SceneService(config).generate_scene(*job)


def cluster_anchors(trajectories: Sequence[Trajectory], m: int, seed: int = 0) -> List[Trajectory]:
    """k-means cluster centers over flattened trajectories"""
    if m < 1 or not trajectories:
        raise InsufficientData("anchor clustering needs a non-empty corpus and m >= 1")
    data = np.stack([flatten(t) for t in trajectories])
    distinct = np.unique(data, axis=0)
    if len(data) < m or len(distinct) < m:
        raise InsufficientData(f"corpus has {len(distinct)} distinct trajectories, fewer than m={m}")
    model = KMeans(n_clusters=m, n_init=10, random_state=seed).fit(data)
    dt = trajectories[0].dt
    horizon = trajectories[0].horizon
    return [Trajectory(center.reshape(horizon, 2), dt) for center in model.cluster_centers_]


def generate_anchors(corpus: Sequence[Scene], m: int, seed: int = 0) -> List[Trajectory]:
    if not corpus:
        raise InsufficientData("anchor generation needs a non-empty corpus")
    return cluster_anchors([scene.gt for scene in corpus], m, seed)


def is_turning(scene: Scene, threshold_deg: float = 45.0) -> bool:
    return abs(np.rad2deg(heading_change(scene.gt))) > threshold_deg
