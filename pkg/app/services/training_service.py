import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.config import RunConfig, config_hash
from app.exceptions import InsufficientData, InvalidGroup, NonFiniteLoss
from app.models.denoiser_params import DenoiserParams, SceneTokens
from app.models.scene import Scene
from app.models.trajectory import SCENE_BOUND, Trajectory, TrajectorySet
from app.repositories.checkpoint_repository import Checkpoint, CheckpointRepository
from app.services.denoiser_service import DenoiserService
from app.services.diffusion_service import DiffusionService
from app.services.matching_service import l1_loss, match_loss
from app.services.optimizer import Adam
from app.services.reward_service import (build_grpo_batch, grpo_loss, policy_logprob, policy_logprob_grad,
                                         ppo_advantages, total_reward, total_loss)
from app.services.scene_service import generate_anchors
from app.utils.csv_loader import append_csv
from app.utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

TRAIN_METRIC_COLUMNS = ['step', 'epoch', 'L_match', 'L_RL', 'r_div', 'r_safe', 'grad_norm', 'loss']
TRAIN_LOG_COLUMNS = TRAIN_METRIC_COLUMNS + ['config_hash']
NAN_DUMP = 'nan_dump.json'
CENTERING_TOLERANCE = 1e-9
STEP_STREAM = 0x7A


@dataclass
class TrainingResult:
    params: DenoiserParams
    anchors: List[Trajectory]
    step: int
    history: List[dict] = field(default_factory=list)


@dataclass
class _SceneStep:
    scene: Scene
    cache: dict
    pred: np.ndarray
    imitation: float
    imitation_grad: np.ndarray
    actions: Optional[np.ndarray] = None
    rewards: Optional[np.ndarray] = None
    r_div: float = 0.0
    r_safe: float = 0.0


def anchors_to_extra(anchors: Sequence[Trajectory]) -> dict:
    return {'anchors': [a.points.tolist() for a in anchors], 'dt': anchors[0].dt if anchors else 0.5}


def anchors_from_extra(extra: dict) -> List[Trajectory]:
    dt = float(extra.get('dt', 0.5))
    return [Trajectory(np.array(points, dtype=np.float64), dt) for points in extra.get('anchors', [])]


class TrainingService:
    """
    Minibatch training of the denoiser on a scene corpus.

    Each step noises the anchors (or the gt) of every scene in the batch,
    predicts the clean trajectories, and combines the imitation loss with the
    group-relative policy loss computed on Gaussian actions around the
    prediction. Gradients are averaged over the batch before one Adam update.
    """

    def __init__(self, config: RunConfig, denoiser: DenoiserService, diffusion: DiffusionService,
                 checkpoints: Optional[CheckpointRepository] = None):
        self.config = config
        self.denoiser = denoiser
        self.diffusion = diffusion
        self.checkpoints = checkpoints or CheckpointRepository()

    def steps_per_epoch(self, num_scenes: int) -> int:
        return math.ceil(num_scenes / self.config.batch_size) if num_scenes else 0

    def epoch_order(self, num_scenes: int, epoch: int) -> np.ndarray:
        return make_rng(self.config.seed, STEP_STREAM, epoch).permutation(num_scenes)

    def train(self, scenes: Sequence[Scene], out_path: Optional[str] = None, resume_from: Optional[str] = None,
              log_path: Optional[str] = None, max_steps: Optional[int] = None) -> TrainingResult:
        """
        Train on `scenes` for config.epochs epochs.

        Args:
            scenes: Training corpus
            out_path: Checkpoint rewritten after every epoch and at the end
            resume_from: Checkpoint to continue from; its step count decides where to pick up
            log_path: Training CSV, appended to when resuming
            max_steps: Stop after this many global steps

        Returns:
            TrainingResult: Final weights, the anchors trained with, and the logged rows
        """
        c = self.config
        if not scenes:
            raise InsufficientData("training needs at least one scene")
        optimizer = Adam.from_config(c)
        if resume_from:
            checkpoint = self.checkpoints.load(resume_from, self.denoiser.shape_dict())
            params = checkpoint.params
            optimizer.load_state(checkpoint.adam_step, checkpoint.adam_m, checkpoint.adam_v)
            anchors = anchors_from_extra(checkpoint.extra) or generate_anchors(scenes, c.modes, c.seed)
            step = checkpoint.step
            logger.info("resuming from %s at step %d", resume_from, step)
        else:
            params = self.denoiser.init_params()
            anchors = generate_anchors(scenes, c.modes, c.seed)
            step = 0

        scenes = [s.with_anchors(anchors) for s in scenes]
        tokens = {}
        per_epoch = self.steps_per_epoch(len(scenes))
        total_steps = per_epoch * c.epochs
        if max_steps is not None:
            total_steps = min(total_steps, max_steps)
        logger.info("training %d parameters on %d scenes for %d steps", params.num_parameters(),
                    len(scenes), total_steps)

        history = []
        run_hash = config_hash(c)
        try:
            while step < total_steps:
                epoch, index = divmod(step, per_epoch)
                order = self.epoch_order(len(scenes), epoch)
                batch = [scenes[i] for i in order[index * c.batch_size:(index + 1) * c.batch_size]]
                for scene in batch:
                    if scene.scene_id not in tokens:
                        tokens[scene.scene_id] = self.denoiser.build_scene_tokens(scene)
                row = self.train_step(params, optimizer, batch, tokens, step, epoch)
                row['config_hash'] = run_hash
                history.append(row)
                step += 1
                if step % max(per_epoch, 1) == 0:
                    logger.info("epoch %d done: L_match=%.4f L_RL=%.4f r_div=%.3f", epoch,
                                row['L_match'], row['L_RL'], row['r_div'])
                    if out_path:
                        self.save(out_path, params, optimizer, anchors, step, epoch + 1)
        finally:
            if log_path:
                append_csv(history, log_path, TRAIN_LOG_COLUMNS)

        if out_path:
            self.save(out_path, params, optimizer, anchors, step, step // max(per_epoch, 1))
        return TrainingResult(params, anchors, step, history)

    def save(self, out_path: str, params: DenoiserParams, optimizer: Adam, anchors: Sequence[Trajectory],
             step: int, epoch: int) -> None:
        checkpoint = Checkpoint(params, config_hash(self.config), step, epoch, optimizer.step_count,
                                optimizer.m, optimizer.v, anchors_to_extra(anchors))
        self.checkpoints.save(out_path, checkpoint)

    def _forward_scene(self, params: DenoiserParams, scene: Scene, tokens: SceneTokens,
                       rng: np.random.Generator, step: int, epoch: int) -> _SceneStep:
        c = self.config
        t = int(rng.integers(0, max(c.truncation_steps, 1)))
        noisy, _ = self.diffusion.training_inputs(scene, t, rng)
        anchors = self.diffusion.normalized_anchors(scene, c.modes)
        pred_n, cache = self.denoiser.forward(params, noisy, t, anchors, tokens)
        pred = pred_n * c.norm_scale
        if not np.all(np.isfinite(pred)):
            self._dump_nan(params, scene.scene_id, step, epoch, {'prediction_finite': False})
        if c.imitation_loss == 'match':
            loss, _, grad = match_loss(pred, scene.reference_gts)
        else:
            loss, grad = l1_loss(pred, scene.gt)
        record = _SceneStep(scene, cache, pred, loss, grad)

        actions = pred + c.sigma * rng.standard_normal(pred.shape)
        clipped = np.clip(actions, -SCENE_BOUND, SCENE_BOUND)
        group = TrajectorySet.from_array(clipped, scene.scene_id, scene.gt.dt)
        breakdown = total_reward(group, scene.safety_field, c.lambda_safe, c.d_thresh, centers=pred)
        record.actions = actions
        record.rewards = np.array(breakdown.totals)
        record.r_div = breakdown.r_div
        record.r_safe = breakdown.mean_safe
        return record

    def _policy_terms(self, records: List[_SceneStep]) -> List[tuple]:
        """(loss, d loss / d pred) of the policy objective for every scene"""
        c = self.config
        if c.rl_algo == 'none':
            return [(0.0, np.zeros_like(r.pred)) for r in records]
        if c.rl_algo == 'ppo':
            advantages = ppo_advantages([r.rewards for r in records], c.std_scale_advantages)
        else:
            advantages = [None] * len(records)

        terms = []
        for record, adv in zip(records, advantages):
            logp = [policy_logprob(a, m, c.sigma) for a, m in zip(record.actions, record.pred)]
            batch = build_grpo_batch(record.rewards, logp, logp, adv, c.std_scale_advantages)
            if c.rl_algo == 'grpo' and abs(float(batch.centered.sum())) > CENTERING_TOLERANCE:
                raise InvalidGroup(f"centered advantages sum to {batch.centered.sum():.3g}")
            loss, dlogp = grpo_loss(batch, c.clip_eps, c.use_clip)
            grad = dlogp[:, None, None] * policy_logprob_grad(record.actions, record.pred, c.sigma)
            terms.append((loss, grad))
        return terms

    def train_step(self, params: DenoiserParams, optimizer: Adam, batch: Sequence[Scene],
                   tokens: Dict[str, SceneTokens], step: int, epoch: int) -> dict:
        c = self.config
        records = [self._forward_scene(params, scene, tokens[scene.scene_id],
                                       make_rng(derive_seed(c.seed, STEP_STREAM, step), i), step, epoch)
                   for i, scene in enumerate(batch)]
        policy = self._policy_terms(records)

        losses, rl_losses = [], []
        for record, (rl_loss, rl_grad) in zip(records, policy):
            loss = total_loss(record.imitation, rl_loss, c.lambda_match, c.lambda_rl)
            if not np.isfinite(loss):
                self._dump_nan(params, record.scene.scene_id, step, epoch,
                               {'loss': repr(loss), 'imitation': repr(record.imitation)})
            dpred = (c.lambda_match * record.imitation_grad + c.lambda_rl * rl_grad) * c.norm_scale
            self.denoiser.backward(params, dpred, record.cache)
            losses.append(loss)
            rl_losses.append(rl_loss)

        grad_norm = optimizer.step(params, scale=1.0 / len(records))
        return {
            'step': step,
            'epoch': epoch,
            'L_match': float(np.mean([r.imitation for r in records])),
            'L_RL': float(np.mean(rl_losses)),
            'r_div': float(np.mean([r.r_div for r in records])),
            'r_safe': float(np.mean([r.r_safe for r in records])),
            'grad_norm': grad_norm,
            'loss': float(np.mean(losses)),
        }

    def _dump_nan(self, params: DenoiserParams, scene_id: str, step: int, epoch: int, detail: dict) -> None:
        os.makedirs(self.config.output_dir, exist_ok=True)
        dump_path = os.path.join(self.config.output_dir, NAN_DUMP)
        dump = {'step': step, 'epoch': epoch, 'scene_id': scene_id, 'weight_norms': params.weight_norms()}
        dump.update(detail)
        with open(dump_path, 'w') as f:
            json.dump(dump, f, sort_keys=True, indent=2)
        logger.error("non-finite loss at step %d on scene %s", step, scene_id)
        raise NonFiniteLoss(step, dump_path)
