import json
import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from app.config import RunConfig, config_hash
from app.models.denoiser_params import DenoiserParams
from app.models.results import MetricReport
from app.models.scene import Scene
from app.models.trajectory import Trajectory, TrajectorySet
from app.repositories.trajectory_repository import TrajectoryRepository
from app.services.denoiser_service import DenoiserService
from app.services.diffusion_service import DiffusionService
from app.services.metrics_service import build_report, select_mode
from app.services.reward_service import total_reward
from app.services.scene_service import SceneService
from app.utils.csv_loader import write_csv
from app.utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

EVAL_STREAM = 0xE7
HOLDOUT_FRACTION = 0.2
METRIC_COLUMNS = ['t', 'div', 'collision']
ABLATION_AXES = ('Loss', 'KRef', 'LambdaSafe', 'Condition')

LOSS_VARIANTS = (
    ('L1 Loss', {'imitation_loss': 'l1', 'rl_algo': 'none'}),
    ('L1+L_RL(PPO)', {'imitation_loss': 'l1', 'rl_algo': 'ppo'}),
    ('L_match', {'imitation_loss': 'match', 'rl_algo': 'none'}),
    ('L_match+L_RL(PPO)', {'imitation_loss': 'match', 'rl_algo': 'ppo'}),
    ('L_match+L_RL(GRPO)', {'imitation_loss': 'match', 'rl_algo': 'grpo'}),
)
K_REF_SWEEP = tuple(range(0, 9))
LAMBDA_SAFE_SWEEP = (0.0, 0.5, 1.0, 2.0, 4.0)


@dataclass
class Evaluation:
    report: MetricReport
    sets: List[TrajectorySet]
    selected: List[int]


def split_corpus(scenes: Sequence[Scene], holdout_fraction: float = HOLDOUT_FRACTION) -> Tuple[List[Scene], List[Scene]]:
    """Deterministic (train, held-out) split by corpus order; tiny corpora are used for both"""
    scenes = list(scenes)
    holdout = int(len(scenes) * holdout_fraction)
    if holdout == 0 or holdout == len(scenes):
        return scenes, scenes
    return scenes[:-holdout], scenes[-holdout:]


class EvaluationService:
    """Sampling, metric reporting and the ablation harness"""

    def __init__(self, config: RunConfig, denoiser: DenoiserService, diffusion: DiffusionService,
                 trajectories: Optional[TrajectoryRepository] = None):
        self.config = config
        self.denoiser = denoiser
        self.diffusion = diffusion
        self.trajectories = trajectories or TrajectoryRepository()

    def sample_corpus(self, params: DenoiserParams, anchors: Sequence[Trajectory], scenes: Sequence[Scene],
                      num_denoise_steps: Optional[int] = None) -> List[TrajectorySet]:
        c = self.config
        steps = c.truncation_steps if num_denoise_steps is None else num_denoise_steps
        sets = []
        for index, scene in enumerate(scenes):
            rng = make_rng(c.seed, EVAL_STREAM, index)
            sets.append(self.diffusion.sample(params, scene.with_anchors(anchors), c.modes, steps, rng))
        return sets

    def evaluate(self, params: DenoiserParams, anchors: Sequence[Trajectory], scenes: Sequence[Scene],
                 num_denoise_steps: Optional[int] = None) -> Evaluation:
        """Sample every scene, select the highest-reward mode and aggregate the metrics"""
        c = self.config
        sets = self.sample_corpus(params, anchors, scenes, num_denoise_steps)
        selected = []
        for trajectory_set, scene in zip(sets, scenes):
            breakdown = total_reward(trajectory_set, scene.safety_field, c.lambda_safe, c.d_thresh)
            selected.append(select_mode(breakdown.totals))
        report = build_report(sets, [s[i] for s, i in zip(sets, selected)], [scene.gt for scene in scenes],
                              [scene.safety_field for scene in scenes], c.d_thresh)
        logger.info("evaluated %d scenes: div avg %.4f, collision avg %.4f", len(scenes), report.div_avg,
                    report.collision_avg)
        return Evaluation(report, sets, selected)

    def write_outputs(self, evaluation: Evaluation, out_dir: str, corpus_hash: str) -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            'trajectories': os.path.join(out_dir, 'trajectories.jsonl'),
            'metrics': os.path.join(out_dir, 'metrics.csv'),
            'summary': os.path.join(out_dir, 'summary.json'),
        }
        self.trajectories.write(paths['trajectories'], evaluation.sets, corpus_hash)
        write_csv(evaluation.report.per_step_rows(), paths['metrics'], METRIC_COLUMNS)
        summary = evaluation.report.summary()
        summary['config_hash'] = corpus_hash
        summary['selected_modes'] = evaluation.selected
        with open(paths['summary'], 'w') as f:
            json.dump(summary, f, sort_keys=True, indent=2)
        return paths


def ablation_variants(axis: str, base: RunConfig) -> List[Tuple[str, RunConfig]]:
    if axis == 'Loss':
        return [(name, base.replace(**overrides)) for name, overrides in LOSS_VARIANTS]
    if axis == 'KRef':
        return [(f"K_ref={k}", base.replace(k_ref=k)) for k in K_REF_SWEEP]
    if axis == 'LambdaSafe':
        return [(f"lambda_safe={v:g}", base.replace(lambda_safe=v)) for v in LAMBDA_SAFE_SWEEP]
    if axis == 'Condition':
        return [('with condition', base.replace(use_condition=True)),
                ('without condition', base.replace(use_condition=False))]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def with_reference_count(scenes: Sequence[Scene], config: RunConfig) -> List[Scene]:
    """Regenerate each scene's references for config.k_ref; K_ref = 0 keeps the gt alone"""
    service = SceneService(config)
    updated = []
    for index, scene in enumerate(scenes):
        k = max(config.k_ref, 1)
        references = service.generate_reference_gts(scene, k, derive_seed(config.seed, 0xAB, index), strict=False)
        updated.append(scene.with_references(references))
    return updated


def run_ablation(axis: str, base: RunConfig, scenes: Sequence[Scene],
                 train: Callable[[RunConfig, List[Scene]], Tuple[DenoiserParams, List[Trajectory]]]) -> List[dict]:
    """
    Train and evaluate one variant per row of the chosen axis.

    Args:
        axis: One of Loss, KRef, LambdaSafe, Condition
        base: Configuration the variants are derived from
        scenes: Corpus, split into training and held-out scenes
        train: Returns (weights, anchors) for a variant config and training scenes

    Returns:
        List[dict]: One row per variant with Div at every whole second and the average
    """
    rows = []
    for name, config in ablation_variants(axis, base):
        train_scenes, eval_scenes = split_corpus(scenes)
        if axis == 'KRef':
            train_scenes = with_reference_count(train_scenes, config)
        denoiser = DenoiserService(config)
        diffusion = DiffusionService(config, denoiser)
        params, anchors = train(config, train_scenes)
        evaluation = EvaluationService(config, denoiser, diffusion).evaluate(params, anchors, eval_scenes)
        summary = evaluation.report.summary()
        row = {'variant': name}
        row.update({f"div_{key}": value for key, value in summary['div'].items()})
        row['collision_avg'] = summary['collision']['avg']
        row['avg_l2'] = summary['avg_l2']
        row['config_hash'] = config_hash(config)
        rows.append(row)
        logger.info("ablation %s / %s: div avg %.4f", axis, name, row['div_avg'])
    return rows
