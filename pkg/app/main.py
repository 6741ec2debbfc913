import argparse
import logging
import os
import sys
from typing import List, Optional

from app.config import DIVER_LOG_LEVEL, TRAINING_LOG_CSV, configure_logging, config_hash, load_run_config
from app.exceptions import ConfigError, ConfigMismatch, DiverError
from app.repositories.checkpoint_repository import CheckpointRepository
from app.repositories.scene_repository import SceneRepository
from app.repositories.trajectory_repository import TrajectoryRepository
from app.services.denoiser_service import DenoiserService
from app.services.diffusion_service import DiffusionService
from app.services.evaluation_service import ABLATION_AXES, EvaluationService, run_ablation
from app.services.plot_service import PlotService
from app.services.scene_service import SceneService, generate_anchors, is_turning
from app.services.training_service import TrainingService, anchors_from_extra
from app.utils.csv_loader import write_csv

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ['variant', 'div_1s', 'div_2s', 'div_3s', 'div_avg', 'collision_avg', 'avg_l2', 'config_hash']


def _templates(raw: Optional[str]):
    return tuple(t.strip() for t in raw.split(',') if t.strip()) if raw else None


def _load_config(args, **overrides):
    return load_run_config(args.config, seed=args.seed, **overrides)


def _checkpoint(config, checkpoints: CheckpointRepository, weights: str, manifest_hash: str, force: bool):
    checkpoint = checkpoints.load(weights, DenoiserService(config).shape_dict())
    if checkpoint.config_hash != manifest_hash:
        if not force:
            raise ConfigMismatch(
                f"checkpoint {weights} was trained under config {checkpoint.config_hash[:12]}, "
                f"scenes were generated under {manifest_hash[:12]} (use --force to evaluate anyway)")
        logger.warning("config hash mismatch ignored (--force)")
    return checkpoint


def cmd_scene_gen(args) -> int:
    config = _load_config(args, num_scenes=args.num_scenes, templates=_templates(args.templates),
                          workers=args.workers)
    scene_repository = SceneRepository(args.out or config.scenes_dir)
    scenes = SceneService(config).generate_corpus(config.num_scenes)
    manifest = scene_repository.save_corpus(scenes, config_hash(config),
                                            {'seed': config.seed, 'd_thresh': config.d_thresh})
    logger.info("wrote %d scenes to %s", manifest['count'], scene_repository.scenes_dir)
    return 0


def cmd_train(args) -> int:
    config = _load_config(args, epochs=args.epochs)
    scene_repository = SceneRepository(args.scenes or config.scenes_dir)
    scenes = scene_repository.load_corpus(None if args.force else config_hash(config), config.d_thresh)

    denoiser = DenoiserService(config)
    training_service = TrainingService(config, denoiser, DiffusionService(config, denoiser), CheckpointRepository())
    out = args.out or os.path.join(config.output_dir, 'weights.bin')
    log_path = args.log or os.path.join(os.path.dirname(out) or '.', TRAINING_LOG_CSV)
    result = training_service.train(scenes, out_path=out, resume_from=args.resume, log_path=log_path,
                                    max_steps=args.max_steps)
    logger.info("trained %d steps, checkpoint at %s", result.step, out)
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    scene_repository = SceneRepository(args.scenes or config.scenes_dir)
    manifest_hash = scene_repository.load_manifest()['config_hash']
    checkpoint = _checkpoint(config, CheckpointRepository(), args.weights, manifest_hash, args.force)
    scenes = scene_repository.load_corpus()
    if args.turning_only:
        scenes = [scene for scene in scenes if is_turning(scene)]
        logger.info("evaluating the %d turning scenes", len(scenes))

    denoiser = DenoiserService(config)
    evaluation_service = EvaluationService(config, denoiser, DiffusionService(config, denoiser),
                                           TrajectoryRepository())
    anchors = anchors_from_extra(checkpoint.extra) or generate_anchors(scenes, config.modes, config.seed)
    evaluation = evaluation_service.evaluate(checkpoint.params, anchors, scenes, args.steps)
    paths = evaluation_service.write_outputs(evaluation, args.out or config.output_dir, manifest_hash)
    logger.info("wrote %s", ', '.join(sorted(paths.values())))
    return 0


def cmd_sample(args) -> int:
    config = _load_config(args, modes=args.modes)
    scene_repository = SceneRepository(args.scenes or config.scenes_dir)
    manifest_hash = scene_repository.load_manifest()['config_hash']
    checkpoint = _checkpoint(config, CheckpointRepository(), args.weights, manifest_hash, args.force)
    scenes = scene_repository.load_corpus()

    denoiser = DenoiserService(config)
    evaluation_service = EvaluationService(config, denoiser, DiffusionService(config, denoiser))
    anchors = anchors_from_extra(checkpoint.extra) or generate_anchors(scenes, config.modes, config.seed)
    sets = evaluation_service.sample_corpus(checkpoint.params, anchors, scenes, args.steps)
    count = TrajectoryRepository().write(args.out, sets, manifest_hash)
    logger.info("wrote %d trajectories to %s", count, args.out)
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args, epochs=args.epochs)
    scenes = SceneRepository(args.scenes or config.scenes_dir).load_corpus()

    def train(variant_config, train_scenes):
        denoiser = DenoiserService(variant_config)
        service = TrainingService(variant_config, denoiser, DiffusionService(variant_config, denoiser))
        result = service.train(train_scenes)
        return result.params, result.anchors

    rows = run_ablation(args.axis, config, scenes, train)
    out = args.out or os.path.join(config.output_dir, f"ablation_{args.axis}.csv")
    write_csv(rows, out, ABLATION_COLUMNS)
    logger.info("wrote %d ablation rows to %s", len(rows), out)
    return 0


def cmd_plot(args) -> int:
    config = _load_config(args)
    scene_dir, scene_file = os.path.split(os.path.abspath(args.scene))
    scene = SceneRepository(scene_dir).load_scene(scene_file)
    sets = TrajectoryRepository().read(args.traj)
    PlotService(config.d_thresh).render(scene, sets.get(scene.scene_id), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='KEY=value run configuration file')
    common.add_argument('--seed', type=int, help='overrides the configured seed')
    common.add_argument('--log-level', default=None, help='logging level (default DIVER_LOG_LEVEL)')

    parser = argparse.ArgumentParser(prog='diver', description='Diffusion trajectory planner harness')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('scene-gen', parents=[common], help='generate a synthetic scene corpus')
    p.add_argument('--out', help='scene directory')
    p.add_argument('--num-scenes', '-n', type=int, help='number of scenes')
    p.add_argument('--templates', help='comma separated template mix')
    p.add_argument('--workers', type=int, help='generation processes')
    p.set_defaults(handler=cmd_scene_gen)

    p = commands.add_parser('train', parents=[common], help='train the denoiser on a scene corpus')
    p.add_argument('--scenes', help='scene directory')
    p.add_argument('--out', help='checkpoint to write')
    p.add_argument('--resume', help='checkpoint to resume from')
    p.add_argument('--log', help='training CSV (default next to the checkpoint)')
    p.add_argument('--epochs', type=int)
    p.add_argument('--max-steps', type=int)
    p.add_argument('--force', action='store_true', help='train even if the corpus config hash differs')
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser('eval', parents=[common], help='sample, select and score every scene')
    p.add_argument('--weights', required=True)
    p.add_argument('--scenes', help='scene directory')
    p.add_argument('--out', help='output directory')
    p.add_argument('--steps', type=int, help='denoising steps (default truncation_steps)')
    p.add_argument('--force', action='store_true', help='ignore a checkpoint/corpus config hash mismatch')
    p.add_argument('--turning-only', action='store_true', help='only scenes whose gt turns more than 45 degrees')
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser('sample', parents=[common], help='write sampled modes as trajectory JSONL')
    p.add_argument('--weights', required=True)
    p.add_argument('--scenes', help='scene directory')
    p.add_argument('--modes', type=int)
    p.add_argument('--steps', type=int)
    p.add_argument('--out', required=True, help='trajectory JSONL')
    p.add_argument('--force', action='store_true')
    p.set_defaults(handler=cmd_sample)

    p = commands.add_parser('ablate', parents=[common], help='train and evaluate one ablation axis')
    p.add_argument('--axis', required=True, choices=ABLATION_AXES)
    p.add_argument('--scenes', help='scene directory')
    p.add_argument('--epochs', type=int)
    p.add_argument('--out', help='comparison CSV')
    p.set_defaults(handler=cmd_ablate)

    p = commands.add_parser('plot', parents=[common], help='render a scene and its trajectories to SVG')
    p.add_argument('--traj', required=True, help='trajectory JSONL')
    p.add_argument('--scene', required=True, help='scene JSON file')
    p.add_argument('--out', required=True, help='SVG to write')
    p.set_defaults(handler=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    configure_logging(args.log_level or DIVER_LOG_LEVEL)

    try:
        return args.handler(args)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"diver: error: {e}", file=sys.stderr)
        return 2
    except (DiverError, OSError, RuntimeError, ValueError, ArithmeticError) as e:
        print(f"diver: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
