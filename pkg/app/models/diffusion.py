from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.exceptions import InvalidSchedule
from app.models.trajectory import Trajectory


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """beta / alpha / cumulative-alpha tables indexed by diffusion step"""
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for name in ('betas', 'alphas', 'alpha_bars'):
            table = np.array(getattr(self, name), dtype=np.float64, copy=True)
            table.setflags(write=False)
            object.__setattr__(self, name, table)
        if not (len(self.betas) == len(self.alphas) == len(self.alpha_bars)) or len(self.betas) < 2:
            raise InvalidSchedule("schedule tables must share a length >= 2")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise InvalidSchedule("betas must lie in (0, 1)")
        if not np.all(np.diff(self.alpha_bars) < 0):
            raise InvalidSchedule("alpha_bars must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return len(self.betas)


@dataclass(frozen=True, eq=False)
class NoisedTrajectory:
    """A forward-noised trajectory with the Gaussian draw that produced it"""
    values: Trajectory
    step: int
    eps: np.ndarray

    def __post_init__(self):
        if self.eps.shape != self.values.points.shape:
            raise ValueError(f"eps shape {self.eps.shape} does not match values {self.values.points.shape}")
