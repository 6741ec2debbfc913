import logging
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from app.exceptions import InvalidBatch, InvalidCost
from app.models.results import Assignment
from app.models.trajectory import Trajectory, TrajectorySet

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12

TrajectoryBatch = Union[TrajectorySet, np.ndarray, Sequence[Trajectory]]


def _stack(trajs: TrajectoryBatch) -> np.ndarray:
    if isinstance(trajs, TrajectorySet):
        return trajs.stack()
    if isinstance(trajs, np.ndarray):
        return np.asarray(trajs, dtype=np.float64)
    if not len(trajs):
        return np.zeros((0, 0, 2))
    return np.stack([t.points if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64) for t in trajs])


def _optimum(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def lexicographic_assignment(cost: np.ndarray) -> Tuple[Tuple[int, ...], float]:
    """
    Minimum-cost assignment of every row to a distinct column, rows <= columns.

    Among optimal assignments the lexicographically smallest column sequence
    is returned: rows are fixed in order, each to the smallest column that
    still admits an optimal completion.
    """
    n_rows, n_cols = cost.shape
    best = _optimum(cost)
    tolerance = TIE_TOLERANCE * max(1.0, abs(best))
    perm, spent = [], 0.0
    free_cols = list(range(n_cols))
    for row in range(n_rows):
        rest_rows = list(range(row + 1, n_rows))
        for col in free_cols:
            remaining = [c for c in free_cols if c != col]
            completion = _optimum(cost[np.ix_(rest_rows, remaining)]) if rest_rows else 0.0
            if spent + cost[row, col] + completion <= best + tolerance:
                perm.append(col)
                spent += cost[row, col]
                free_cols.remove(col)
                break
        else:
            raise InvalidCost("assignment search failed to recover the optimum")
    total = 0.0
    for row, col in enumerate(perm):
        total += float(cost[row, col])
    return tuple(perm), total


def hungarian(cost: np.ndarray) -> Assignment:
    """
    Optimal one-to-one assignment on a square, finite, nonnegative cost matrix.

    Args:
        cost: M x M matrix, cost[i, j] of matching prediction i to reference j

    Returns:
        Assignment: perm maps prediction index to reference index; ties go to
        the lexicographically smallest permutation
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InvalidCost(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise InvalidCost("cost matrix contains NaN or Inf")
    if np.any(cost < 0):
        raise InvalidCost("cost matrix must be nonnegative")
    perm, total = lexicographic_assignment(cost)
    return Assignment(perm, total)


def pairwise_sq_distance(preds: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """(M, K) squared l2 distances between flattened trajectories"""
    a = preds.reshape(len(preds), -1)
    b = refs.reshape(len(refs), -1)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum('mkd,mkd->mk', diff, diff)


def match_loss(preds: TrajectoryBatch, refs: TrajectoryBatch) -> Tuple[float, Assignment, np.ndarray]:
    """
    Hungarian-matched imitation loss.

    cost(i, j) is the squared flattened l2 distance; the loss is the mean
    matched cost over the M predictions. With fewer references than modes the
    references are cycled; with more, the M best matched are kept.

    Returns:
        Tuple: (loss, assignment into the cycled/kept reference list,
        (M, T, 2) gradient of the loss w.r.t. every predicted waypoint)
    """
    pred = _stack(preds)
    ref = _stack(refs)
    if pred.size == 0 or ref.size == 0 or len(pred) == 0 or len(ref) == 0:
        raise InvalidBatch("match_loss needs non-empty predictions and references")
    if pred.shape[1:] != ref.shape[1:]:
        raise InvalidBatch(f"prediction shape {pred.shape[1:]} does not match reference shape {ref.shape[1:]}")

    modes = len(pred)
    if len(ref) < modes:
        logger.debug("cycling %d references to cover %d modes", len(ref), modes)
        ref = ref[np.arange(modes) % len(ref)]
    cost = pairwise_sq_distance(pred, ref)

    if len(ref) > modes:
        perm, total = lexicographic_assignment(cost)
        logger.debug("dropped %d unmatched references", len(ref) - modes)
        assignment = Assignment(perm, total)
    else:
        assignment = hungarian(cost)

    matched = ref[list(assignment.perm)]
    grad = 2.0 * (pred - matched) / modes
    return assignment.total_cost / modes, assignment, grad


def l1_loss(preds: TrajectoryBatch, gt: Union[Trajectory, np.ndarray]) -> Tuple[float, np.ndarray]:
    """Mean over modes of the flattened l1 distance to the single gt, with its gradient"""
    pred = _stack(preds)
    if pred.size == 0:
        raise InvalidBatch("l1_loss needs non-empty predictions")
    target = gt.points if isinstance(gt, Trajectory) else np.asarray(gt, dtype=np.float64)
    if pred.shape[1:] != target.shape:
        raise InvalidBatch(f"prediction shape {pred.shape[1:]} does not match gt shape {target.shape}")
    diff = pred - target[None]
    modes = len(pred)
    return float(np.abs(diff).sum() / modes), np.sign(diff) / modes
