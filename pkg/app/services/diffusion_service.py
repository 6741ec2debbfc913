import logging
from typing import Optional, Tuple

import numpy as np

from app.config import RunConfig
from app.exceptions import InvalidSchedule, MissingAnchors
from app.models.denoiser_params import DenoiserParams, SceneTokens
from app.models.diffusion import NoisedTrajectory, NoiseSchedule
from app.models.scene import Scene
from app.models.trajectory import SCENE_BOUND, Trajectory, TrajectorySet

logger = logging.getLogger(__name__)

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.2
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


def make_schedule(num_steps: int, kind: str = 'linear') -> NoiseSchedule:
    """Linear betas in [1e-4, 0.2] or the squared-cosine alpha-bar curve"""
    if num_steps < 2:
        raise InvalidSchedule(f"num_steps must be >= 2, got {num_steps}")
    kind = str(kind).lower()
    if kind == 'linear':
        betas = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, num_steps)
    elif kind == 'cosine':
        t = np.arange(num_steps + 1) / num_steps
        f = np.cos((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
        bars = f / f[0]
        betas = np.clip(1.0 - bars[1:] / bars[:-1], 1e-8, MAX_BETA)
    else:
        raise InvalidSchedule(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def forward_noise(traj: Trajectory, schedule: NoiseSchedule, step: int,
                  rng: Optional[np.random.Generator] = None, eps: Optional[np.ndarray] = None) -> NoisedTrajectory:
    """
    Noise a clean trajectory to diffusion step `step`.

    values = sqrt(abar_t) * traj + sqrt(1 - abar_t) * eps. Pass `eps` to fix
    the Gaussian draw instead of sampling it from `rng`.
    """
    if not 0 <= step < schedule.num_steps:
        raise InvalidSchedule(f"step {step} outside [0, {schedule.num_steps})")
    if eps is None:
        if rng is None:
            raise ValueError("forward_noise needs either rng or eps")
        eps = rng.standard_normal(traj.points.shape)
    eps = np.asarray(eps, dtype=np.float64)
    abar = schedule.alpha_bars[step]
    values = np.sqrt(abar) * traj.points + np.sqrt(1.0 - abar) * eps
    return NoisedTrajectory(Trajectory(values, traj.dt), step, eps)


def noise_array(x: np.ndarray, schedule: NoiseSchedule, step: int, eps: np.ndarray) -> np.ndarray:
    abar = schedule.alpha_bars[step]
    return np.sqrt(abar) * x + np.sqrt(1.0 - abar) * eps


def ddim_step(x_t: np.ndarray, x0_pred: np.ndarray, schedule: NoiseSchedule, step: int,
              prev_step: int) -> np.ndarray:
    """Deterministic (eta = 0) move from step to prev_step; prev_step < 0 returns x0_pred"""
    if prev_step < 0:
        return np.array(x0_pred, dtype=np.float64)
    abar_t = schedule.alpha_bars[step]
    abar_prev = schedule.alpha_bars[prev_step]
    eps_hat = (x_t - np.sqrt(abar_t) * x0_pred) / np.sqrt(1.0 - abar_t)
    return np.sqrt(abar_prev) * x0_pred + np.sqrt(1.0 - abar_prev) * eps_hat


class DiffusionService:
    """
    Truncated reverse sampling from noised anchors.

    The denoiser is injected so the sampler can be exercised with any object
    exposing `predict(params, noisy, step, anchors, tokens)` and
    `build_scene_tokens(scene)`.
    """

    def __init__(self, config: RunConfig, denoiser):
        self.config = config
        self.denoiser = denoiser
        self.schedule = make_schedule(config.num_steps, config.schedule)

    def normalized_anchors(self, scene: Scene, m: int) -> np.ndarray:
        if len(scene.anchors) < m or m < 1:
            raise MissingAnchors(f"scene {scene.scene_id} has {len(scene.anchors)} anchors, {m} needed")
        return np.stack([a.points for a in scene.anchors[:m]]) / self.config.norm_scale

    def training_inputs(self, scene: Scene, step: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Noised (M, T, 2) denoiser inputs for one training step plus the draws used"""
        c = self.config
        if c.train_noise_source == 'gt':
            clean = np.repeat(scene.gt.points[None] / c.norm_scale, c.modes, axis=0)
        else:
            clean = self.normalized_anchors(scene, c.modes)
        eps = rng.standard_normal(clean.shape)
        return noise_array(clean, self.schedule, step, eps), eps

    def sample(self, params: DenoiserParams, scene: Scene, m: int, num_denoise_steps: int,
               rng: np.random.Generator, tokens: Optional[SceneTokens] = None) -> TrajectorySet:
        """
        Denoise M noised anchors over the last `num_denoise_steps` steps.

        Args:
            params: Denoiser weights, read only
            scene: Scene providing anchors and conditioning
            m: Number of modes
            num_denoise_steps: Truncation depth; 0 returns the anchors unchanged
            rng: Source of the initial noise draws
            tokens: Precomputed scene tokens, built on demand when None

        Returns:
            TrajectorySet: M trajectories in meters
        """
        if not 0 <= num_denoise_steps <= self.schedule.num_steps:
            raise InvalidSchedule(
                f"num_denoise_steps {num_denoise_steps} outside [0, {self.schedule.num_steps}]")
        anchors = self.normalized_anchors(scene, m)
        dt = scene.gt.dt
        if num_denoise_steps == 0:
            return TrajectorySet(tuple(scene.anchors[:m]), scene.scene_id)

        tokens = tokens if tokens is not None else self.denoiser.build_scene_tokens(scene)
        step = num_denoise_steps - 1
        x = noise_array(anchors, self.schedule, step, rng.standard_normal(anchors.shape))
        while True:
            x0 = self.denoiser.predict(params, x, step, anchors, tokens)
            x = ddim_step(x, x0, self.schedule, step, step - 1)
            if step == 0:
                break
            step -= 1

        meters = x * self.config.norm_scale
        if not np.all(np.isfinite(meters)):
            raise FloatingPointError(f"non-finite sample for scene {scene.scene_id}")
        outside = np.abs(meters) > SCENE_BOUND
        if np.any(outside):
            logger.warning("scene %s: clipped %d sampled coordinates to the scene bound",
                           scene.scene_id, int(outside.sum()))
            meters = np.clip(meters, -SCENE_BOUND, SCENE_BOUND)
        return TrajectorySet.from_array(meters, scene.scene_id, dt)
