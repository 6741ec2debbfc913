import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import InvalidCorpus, InvalidPair, InvalidSet
from app.models.results import MetricReport
from app.models.scene import SafetyField
from app.models.trajectory import Trajectory, TrajectorySet
from app.services.safety_service import query_safety_many

logger = logging.getLogger(__name__)

DIVERSITY_EPS = 1e-6


def diversity_metric(trajs: TrajectorySet, t_index: int) -> float:
    """Mean pairwise waypoint distance at t over the mean waypoint magnitude, clamped to 1"""
    if len(trajs) < 2:
        raise InvalidSet(f"diversity needs at least 2 modes, got {len(trajs)}")
    if not 0 <= t_index < trajs.horizon:
        raise InvalidSet(f"t_index {t_index} outside [0, {trajs.horizon})")
    points = trajs.stack()[:, t_index, :]
    m = len(points)
    i, j = np.triu_indices(m, k=1)
    d_raw = 2.0 / (m * (m - 1)) * np.linalg.norm(points[i] - points[j], axis=1).sum()
    magnitude = np.linalg.norm(points, axis=1).mean()
    return float(min(1.0, d_raw / (DIVERSITY_EPS + magnitude)))


def collision_rate(selected: Sequence[Trajectory], fields: Sequence[SafetyField],
                   d_thresh: float) -> Tuple[np.ndarray, float]:
    """Per-timestamp fraction of scenes whose selected waypoint is closer than d_thresh"""
    if not selected:
        raise InvalidCorpus("collision rate needs a non-empty corpus")
    if len(selected) != len(fields):
        raise InvalidCorpus(f"{len(selected)} trajectories but {len(fields)} safety fields")
    horizon = selected[0].horizon
    hits = np.zeros(horizon)
    for traj, field in zip(selected, fields):
        if traj.horizon != horizon:
            raise InvalidCorpus("all selected trajectories must share T")
        values, _ = query_safety_many(field, traj.points)
        hits += values < d_thresh
    per_t = hits / len(selected)
    return per_t, float(per_t.mean())


def collapse_diagnostic(trajs: TrajectorySet, gt: Optional[Trajectory] = None) -> Tuple[float, Trajectory, Optional[float]]:
    """
    Mode covariance trace and mean trajectory.

    With a gt the literal cross form E[(tau - mu)(gt - mu)^T] is also traced
    and returned third. Because the deviations average to zero over the modes
    that trace is identically zero up to rounding; it is reported only as a
    diagnostic.
    """
    if len(trajs) < 2:
        raise InvalidSet(f"collapse diagnostic needs at least 2 modes, got {len(trajs)}")
    array = trajs.stack()
    flat = array.reshape(len(array), -1)
    mu = flat.mean(axis=0)
    dev = flat - mu
    trace = float(np.einsum('md,md->', dev, dev) / len(flat))
    mean = Trajectory(mu.reshape(array.shape[1:]), trajs.dt)
    cross = None
    if gt is not None:
        cross = float(np.mean(dev @ (gt.points.reshape(-1) - mu)))
    return trace, mean, cross


def avg_l2(pred: Trajectory, gt: Trajectory) -> float:
    if pred.horizon != gt.horizon:
        raise InvalidPair(f"horizon mismatch: {pred.horizon} vs {gt.horizon}")
    return float(np.linalg.norm(pred.points - gt.points, axis=1).mean())


def min_ade(trajs: TrajectorySet, gt: Trajectory) -> float:
    return min(avg_l2(t, gt) for t in trajs)


def select_mode(totals: Sequence[float]) -> int:
    """Index of the highest-reward mode; the first one wins ties"""
    return int(np.argmax(np.asarray(totals, dtype=np.float64)))


def build_report(sets: Sequence[TrajectorySet], selected: Sequence[Trajectory], gts: Sequence[Trajectory],
                 fields: Sequence[SafetyField], d_thresh: float) -> MetricReport:
    """Aggregate per-scene predictions into the corpus MetricReport"""
    if not sets:
        raise InvalidCorpus("cannot report on an empty corpus")
    if not (len(sets) == len(selected) == len(gts) == len(fields)):
        raise InvalidCorpus("sets, selections, gts and fields must align")
    horizon = sets[0].horizon
    div_at = [float(np.mean([diversity_metric(s, t) for s in sets])) for t in range(horizon)]
    collision_at, _ = collision_rate(selected, fields, d_thresh)
    traces, crosses = [], []
    for s, gt in zip(sets, gts):
        trace, _, cross = collapse_diagnostic(s, gt)
        traces.append(trace)
        crosses.append(cross)
    diagnostics: Dict[str, float] = {'collapse_cross_trace': float(np.mean(crosses))}
    return MetricReport(
        div_at=div_at,
        collision_at=[float(v) for v in collision_at],
        avg_l2=float(np.mean([avg_l2(p, g) for p, g in zip(selected, gts)])),
        min_ade=float(np.mean([min_ade(s, g) for s, g in zip(sets, gts)])),
        collapse_trace=float(np.mean(traces)),
        dt=sets[0].dt,
        num_scenes=len(sets),
        diagnostics=diagnostics,
    )
