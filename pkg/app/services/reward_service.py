"""Diversity and safety rewards, group-relative advantages and the clipped policy objective."""
import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import InvalidGroup, InvalidSigma
from app.models.results import GrpoBatch, RewardBreakdown
from app.models.scene import SafetyField
from app.models.trajectory import Trajectory, TrajectorySet
from app.services.safety_service import violation_mask

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6

ModeStack = Union[TrajectorySet, np.ndarray]


def _modes(trajs: ModeStack) -> np.ndarray:
    array = trajs.stack() if isinstance(trajs, TrajectorySet) else np.asarray(trajs, dtype=np.float64)
    return array.reshape(len(array), -1)


def diversity_reward(trajs: ModeStack) -> float:
    """Mean pairwise l2 distance between the flattened modes, in meters"""
    flat = _modes(trajs)
    m = len(flat)
    if m < 2:
        raise InvalidGroup(f"diversity needs at least 2 modes, got {m}")
    i, j = np.triu_indices(m, k=1)
    distances = np.linalg.norm(flat[i] - flat[j], axis=1)
    return float(2.0 / (m * (m - 1)) * distances.sum())


def diversity_reward_gradient(trajs: ModeStack) -> np.ndarray:
    """d r_div / d waypoint for every mode; coincident pairs contribute nothing"""
    array = trajs.stack() if isinstance(trajs, TrajectorySet) else np.asarray(trajs, dtype=np.float64)
    flat = array.reshape(len(array), -1)
    m = len(flat)
    if m < 2:
        raise InvalidGroup(f"diversity needs at least 2 modes, got {m}")
    diff = flat[:, None, :] - flat[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    unit = np.divide(diff, dist[..., None], out=np.zeros_like(diff), where=dist[..., None] > 0)
    return (2.0 / (m * (m - 1)) * unit.sum(axis=1)).reshape(array.shape)


def mode_diversity(trajs: ModeStack, centers: Optional[ModeStack] = None) -> np.ndarray:
    """
    Per-mode diversity: mean l2 distance from each mode to the other modes.

    Without `centers` the other modes are the set itself, so the values
    average exactly to diversity_reward(trajs). With `centers` (the policy
    means the modes were sampled around) mode m is measured against the
    centers of the other modes, which separates the modes of a two-mode group.

    Returns:
        np.ndarray: (M,) distances in meters
    """
    flat = _modes(trajs)
    others = flat if centers is None else _modes(centers)
    m = len(flat)
    if m < 2:
        raise InvalidGroup(f"diversity needs at least 2 modes, got {m}")
    if others.shape != flat.shape:
        raise InvalidGroup(f"centers shape {others.shape} does not match modes {flat.shape}")
    dist = np.linalg.norm(flat[:, None, :] - others[None, :, :], axis=-1)
    np.fill_diagonal(dist, 0.0)
    return dist.sum(axis=1) / (m - 1)


def safety_reward(traj: Trajectory, field: SafetyField, d_thresh: float) -> float:
    """Negative fraction of waypoints with clearance strictly below d_thresh"""
    if not d_thresh > 0:
        raise ValueError(f"d_thresh must be > 0, got {d_thresh}")
    return -float(np.mean(violation_mask(traj, field, d_thresh)))


def total_reward(trajs: TrajectorySet, field: SafetyField, lambda_safe: float, d_thresh: float,
                 centers: Optional[ModeStack] = None) -> RewardBreakdown:
    """Per-mode r_div(mode) + lambda_safe * r_safe(mode).

    r_div(mode) comes from mode_diversity, so it differs between modes and
    survives group centring; the breakdown also keeps the set-level r_div.
    """
    r_div = diversity_reward(trajs)
    r_div_modes = tuple(float(v) for v in mode_diversity(trajs, centers))
    r_safe = tuple(safety_reward(t, field, d_thresh) for t in trajs)
    totals = tuple(d + lambda_safe * r for d, r in zip(r_div_modes, r_safe))
    return RewardBreakdown(r_div, r_safe, totals, lambda_safe, r_div_modes)


def grpo_advantages(rewards: Sequence[float], std_scale: bool = True) -> np.ndarray:
    """Group-centred advantages, optionally scaled by the group standard deviation"""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or len(rewards) < 2:
        raise InvalidGroup(f"a group needs at least 2 members, got {rewards.shape}")
    centered = rewards - rewards.mean()
    if std_scale:
        centered = centered / max(float(rewards.std()), STD_FLOOR)
    return centered


def ppo_advantages(rewards_by_scene: Sequence[Sequence[float]], std_scale: bool = True) -> list:
    """Reward minus the batch-wide baseline; groups are not centred individually"""
    groups = [np.asarray(r, dtype=np.float64) for r in rewards_by_scene]
    if not groups or any(len(g) == 0 for g in groups):
        raise InvalidGroup("PPO advantages need at least one non-empty group")
    pooled = np.concatenate(groups)
    baseline = pooled.mean()
    scale = max(float(pooled.std()), STD_FLOOR) if std_scale else 1.0
    return [(g - baseline) / scale for g in groups]


def build_grpo_batch(rewards: Sequence[float], logp_new: Sequence[float], logp_old: Sequence[float],
                     advantages: Optional[Sequence[float]] = None, std_scale: bool = True) -> GrpoBatch:
    """Assemble a group; `advantages` overrides group centring (PPO variant)"""
    rewards = np.asarray(rewards, dtype=np.float64)
    centered = grpo_advantages(rewards, std_scale) if advantages is None else np.asarray(advantages, dtype=np.float64)
    return GrpoBatch(rewards, np.asarray(logp_new, dtype=np.float64), np.asarray(logp_old, dtype=np.float64),
                     rewards.copy(), centered)


def grpo_loss(batch: GrpoBatch, clip_eps: float, use_clip: bool = True) -> Tuple[float, np.ndarray]:
    """
    Clipped surrogate over one group.

    Per member: -min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) with
    rho = exp(logp_new - logp_old); the loss is the group mean. With
    use_clip=False the term is -rho * A.

    Returns:
        Tuple[float, np.ndarray]: loss and d loss / d logp_new
    """
    rho = np.exp(batch.logp_new - batch.logp_old)
    adv = batch.centered
    m = len(batch)
    unclipped = rho * adv
    if not use_clip:
        return float(-unclipped.mean()), -unclipped / m
    clipped = np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    terms = -np.minimum(unclipped, clipped)
    in_range = (rho >= 1.0 - clip_eps) & (rho <= 1.0 + clip_eps)
    active = (unclipped <= clipped) | in_range
    grad = np.where(active, -unclipped, 0.0) / m
    return float(terms.mean()), grad


def policy_logprob(sampled: Union[Trajectory, np.ndarray], mean: Union[Trajectory, np.ndarray], sigma: float) -> float:
    """Isotropic Gaussian log-density of `sampled` around `mean` over all 2T coordinates"""
    if not sigma > 0:
        raise InvalidSigma(f"sigma must be > 0, got {sigma}")
    a = sampled.points if isinstance(sampled, Trajectory) else np.asarray(sampled, dtype=np.float64)
    mu = mean.points if isinstance(mean, Trajectory) else np.asarray(mean, dtype=np.float64)
    z = (a - mu) / sigma
    return float(-0.5 * np.sum(z * z) - a.size * (np.log(sigma) + 0.5 * np.log(2.0 * np.pi)))


def policy_logprob_grad(sampled: np.ndarray, mean: np.ndarray, sigma: float) -> np.ndarray:
    """d logp / d mean"""
    if not sigma > 0:
        raise InvalidSigma(f"sigma must be > 0, got {sigma}")
    return (np.asarray(sampled, dtype=np.float64) - np.asarray(mean, dtype=np.float64)) / sigma ** 2


def total_loss(match: float, rl: float, lambda_match: float, lambda_rl: float) -> float:
    if lambda_match < 0 or lambda_rl < 0:
        raise ValueError("loss weights must be >= 0")
    return lambda_match * match + lambda_rl * rl
