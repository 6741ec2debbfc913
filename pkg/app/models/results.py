"""Result records produced by matching, rewards and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from app.exceptions import InvalidBatch, InvalidGroup


@dataclass(frozen=True)
class Assignment:
    """perm[i] is the reference index matched to prediction i"""
    perm: Tuple[int, ...]
    total_cost: float

    def __post_init__(self):
        if len(set(self.perm)) != len(self.perm) or any(j < 0 for j in self.perm):
            raise InvalidBatch(f"assignment {self.perm} is not one-to-one")
        if self.total_cost < 0:
            raise InvalidBatch(f"negative assignment cost {self.total_cost}")


@dataclass(frozen=True)
class RewardBreakdown:
    """Set-level r_div for logging; the per-mode totals use r_div_modes"""
    r_div: float
    r_safe: Tuple[float, ...]
    totals: Tuple[float, ...]
    lambda_safe: float
    r_div_modes: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.r_div < 0:
            raise InvalidGroup(f"r_div must be >= 0, got {self.r_div}")
        if any(not -1.0 <= r <= 0.0 for r in self.r_safe):
            raise InvalidGroup("r_safe values must lie in [-1, 0]")
        div_modes = self.r_div_modes or (self.r_div,) * len(self.r_safe)
        if len(div_modes) != len(self.r_safe) or any(d < 0 for d in div_modes):
            raise InvalidGroup("expected one non-negative diversity term per mode")
        expected = [d + self.lambda_safe * r for d, r in zip(div_modes, self.r_safe)]
        if not np.allclose(expected, self.totals, rtol=0, atol=1e-9):
            raise InvalidGroup("totals disagree with r_div + lambda_safe * r_safe")

    @property
    def mean_safe(self) -> float:
        return float(np.mean(self.r_safe))


@dataclass(frozen=True, eq=False)
class GrpoBatch:
    """One scene's group of M sampled actions with their log-probs and advantages"""
    rewards: np.ndarray
    logp_new: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    centered: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, n), dtype=np.float64)
                  for n in ('rewards', 'logp_new', 'logp_old', 'advantages', 'centered')]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise InvalidGroup("GRPO batch arrays must be 1-D and of equal length")
        if not (np.all(np.isfinite(arrays[1])) and np.all(np.isfinite(arrays[2]))):
            raise InvalidGroup("log-probs must be finite")
        for name, array in zip(('rewards', 'logp_new', 'logp_old', 'advantages', 'centered'), arrays):
            object.__setattr__(self, name, array)

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class MetricReport:
    """Per-timestamp diversity and collision plus trajectory error summaries"""
    div_at: List[float]
    collision_at: List[float]
    avg_l2: float
    min_ade: float
    collapse_trace: float
    dt: float
    num_scenes: int
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if any(not 0.0 <= v <= 1.0 for v in self.div_at + self.collision_at):
            raise InvalidBatch("diversity and collision values must lie in [0, 1]")
        if self.avg_l2 < 0 or self.collapse_trace < 0:
            raise InvalidBatch("avg_l2 and collapse_trace must be >= 0")

    @property
    def div_avg(self) -> float:
        return float(np.mean(self.div_at)) if self.div_at else 0.0

    @property
    def collision_avg(self) -> float:
        return float(np.mean(self.collision_at)) if self.collision_at else 0.0

    def per_step_rows(self) -> List[dict]:
        return [{'t': round((i + 1) * self.dt, 6), 'div': d, 'collision': c}
                for i, (d, c) in enumerate(zip(self.div_at, self.collision_at))]

    def summary(self) -> Dict[str, dict]:
        """Values at each whole-second horizon plus the average, keyed like '1s', '2s', 'avg'"""
        div, collision = {}, {}
        steps_per_second = 1.0 / self.dt
        for i in range(len(self.div_at)):
            seconds = (i + 1) / steps_per_second
            if abs(seconds - round(seconds)) < 1e-9:
                key = f"{int(round(seconds))}s"
                div[key] = self.div_at[i]
                collision[key] = self.collision_at[i]
        div['avg'] = self.div_avg
        collision['avg'] = self.collision_avg
        return {
            'div': div,
            'collision': collision,
            'avg_l2': self.avg_l2,
            'min_ade': self.min_ade,
            'collapse_trace': self.collapse_trace,
            'num_scenes': self.num_scenes,
            'diagnostics': dict(self.diagnostics),
        }
