import logging
from typing import Dict, Optional

import numpy as np

from app.models.denoiser_params import DenoiserParams

logger = logging.getLogger(__name__)


class Adam:
    """
    Adam with global gradient-norm clipping.

    Weights are rounded to float32 after every update so a checkpoint written
    at any step restores the exact state.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, grad_clip: float = 5.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, config) -> 'Adam':
        return cls(config.lr, config.beta1, config.beta2, config.adam_eps, config.grad_clip)

    def load_state(self, step_count: int, m: Dict[str, np.ndarray], v: Dict[str, np.ndarray]) -> None:
        self.step_count = int(step_count)
        self.m = {k: np.asarray(a, dtype=np.float64).copy() for k, a in m.items()}
        self.v = {k: np.asarray(a, dtype=np.float64).copy() for k, a in v.items()}

    def step(self, params: DenoiserParams, scale: Optional[float] = None) -> float:
        """Apply one update from params.grads; returns the pre-clip gradient norm"""
        if scale is not None:
            for grad in params.grads.values():
                grad *= scale
        norm = params.grad_norm()
        clip = self.grad_clip / norm if self.grad_clip > 0 and norm > self.grad_clip else 1.0
        if clip < 1.0:
            logger.debug("clipping gradient norm %.4g to %.4g", norm, self.grad_clip)

        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name in params:
            grad = params.grads[name] * clip
            m = self.m.get(name, np.zeros_like(grad))
            v = self.v.get(name, np.zeros_like(grad))
            m = (self.beta1 * m + (1.0 - self.beta1) * grad).astype(np.float32).astype(np.float64)
            v = (self.beta2 * v + (1.0 - self.beta2) * grad * grad).astype(np.float32).astype(np.float64)
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            params.tensors[name] = (params.tensors[name] - update).astype(np.float32).astype(np.float64)
        params.bump_version()
        params.zero_grad()
        return norm
