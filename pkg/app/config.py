import dataclasses
import hashlib
import logging
import os
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from app.exceptions import ConfigError

load_dotenv()

DIVER_LOG_LEVEL = os.getenv('DIVER_LOG_LEVEL', 'INFO')
DIVER_SEED = os.getenv('DIVER_SEED')
DIVER_DATA_DIR = os.getenv('DIVER_DATA_DIR', 'runs')

CONFIG_RUN_ENV = os.getenv('DIVER_CONFIG', 'app/data/run-config.env')
SCENE_MANIFEST = 'manifest.json'
TRAINING_LOG_CSV = 'training_log.csv'

TEMPLATE_NAMES = ('Straight', 'LeftTurn', 'RightTurn', 'Obstacle', 'Merge')

# Fields that shape the scene corpus; their hash ties checkpoints to corpora.
# seed and d_thresh are run-level knobs and only recorded in the manifest.
SCENE_FIELDS = (
    'modes', 'horizon', 'dt', 'k_ref', 'templates', 'cell_size',
    'x_min', 'x_max', 'y_min', 'y_max', 'road_half_width',
)


@dataclass(frozen=True)
class RunConfig:
    """All tunables of a run. Field names are the keys of the config file."""

    # trajectory shape
    modes: int = 6
    horizon: int = 6
    dt: float = 0.5
    k_ref: int = 6

    # network
    embed_dim: int = 64
    num_heads: int = 4
    embed_scale: float = 100.0

    # diffusion
    num_steps: int = 50
    schedule: str = 'linear'
    truncation_steps: int = 10
    norm_scale: float = 30.0
    train_noise_source: str = 'anchor'

    # losses and rewards
    imitation_loss: str = 'match'
    rl_algo: str = 'grpo'
    lambda_match: float = 1.0
    lambda_rl: float = 0.1
    lambda_safe: float = 1.0
    d_thresh: float = 0.5
    sigma: float = 0.3
    clip_eps: float = 0.2
    use_clip: bool = True
    std_scale_advantages: bool = True
    use_condition: bool = True

    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    batch_size: int = 8
    epochs: int = 30

    # scenes
    seed: int = 0
    num_scenes: int = 200
    templates: Tuple[str, ...] = TEMPLATE_NAMES
    cell_size: float = 0.5
    x_min: float = -10.0
    x_max: float = 60.0
    y_min: float = -20.0
    y_max: float = 20.0
    road_half_width: float = 4.0

    # orchestration
    workers: int = 1
    scenes_dir: str = 'runs/scenes'
    output_dir: str = 'runs/out'

    def replace(self, **overrides) -> 'RunConfig':
        updated = dataclasses.replace(self, **overrides)
        validate_config(updated)
        return updated

    def to_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def validate_config(config: RunConfig) -> None:
    """Check the config against the preconditions of every module"""
    problems = []
    if config.modes < 2:
        problems.append('modes must be >= 2')
    if config.horizon < 1:
        problems.append('horizon must be >= 1')
    if config.dt <= 0:
        problems.append('dt must be > 0')
    if not 0 <= config.k_ref <= 64:
        problems.append('k_ref must be in [0, 64]')
    if config.embed_dim % 4 != 0:
        problems.append('embed_dim must be divisible by 4')
    if config.num_heads < 1 or config.embed_dim % config.num_heads != 0:
        problems.append('embed_dim must be divisible by num_heads')
    if config.num_steps < 2:
        problems.append('num_steps must be >= 2')
    if not 0 <= config.truncation_steps <= config.num_steps:
        problems.append('truncation_steps must be in [0, num_steps]')
    if config.schedule not in ('linear', 'cosine'):
        problems.append(f'unknown schedule {config.schedule!r}')
    if config.train_noise_source not in ('anchor', 'gt'):
        problems.append(f'unknown train_noise_source {config.train_noise_source!r}')
    if config.imitation_loss not in ('match', 'l1'):
        problems.append(f'unknown imitation_loss {config.imitation_loss!r}')
    if config.rl_algo not in ('none', 'ppo', 'grpo'):
        problems.append(f'unknown rl_algo {config.rl_algo!r}')
    for name in ('lambda_match', 'lambda_rl', 'lambda_safe', 'lr', 'grad_clip'):
        if getattr(config, name) < 0:
            problems.append(f'{name} must be >= 0')
    for name in ('norm_scale', 'd_thresh', 'sigma', 'cell_size', 'embed_scale', 'road_half_width'):
        if getattr(config, name) <= 0:
            problems.append(f'{name} must be > 0')
    if not 0 <= config.clip_eps < 1:
        problems.append('clip_eps must be in [0, 1)')
    if config.batch_size < 1 or config.epochs < 0 or config.num_scenes < 0 or config.workers < 1:
        problems.append('batch_size/workers must be >= 1, epochs/num_scenes >= 0')
    if config.x_max <= config.x_min or config.y_max <= config.y_min:
        problems.append('scene bounds are degenerate')
    unknown = [t for t in config.templates if t not in TEMPLATE_NAMES]
    if unknown or not config.templates:
        problems.append(f'unknown templates {unknown!r}; expected some of {TEMPLATE_NAMES}')
    if problems:
        raise ConfigError('; '.join(problems))


def _parse_value(name: str, raw: Optional[str], default: object) -> object:
    if raw is None:
        raise ConfigError(f'{name} has no value')
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(item.strip() for item in raw.split(',') if item.strip())
        return raw
    except ValueError:
        raise ConfigError(f'{name}: cannot parse {raw!r} as {type(default).__name__}')


def parse_config(values: Dict[str, Optional[str]], base: Optional[RunConfig] = None) -> RunConfig:
    """Build a RunConfig from raw string values; unknown keys are rejected"""
    base = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    overrides = {}
    for key, raw in values.items():
        name = key.strip().lower()
        if name not in known:
            raise ConfigError(f'unknown config key {key!r}')
        overrides[name] = _parse_value(name, raw, getattr(base, name))
    config = dataclasses.replace(base, **overrides)
    validate_config(config)
    return config


def load_run_config(filepath: Optional[str] = None, **overrides) -> RunConfig:
    """Load the flat key-value run configuration.

    Args:
        filepath: Path to a KEY=value file; the packaged default is used when None.
        overrides: Already-typed values (e.g. from CLI flags) applied last.

    Returns:
        RunConfig: The validated configuration, with DIVER_SEED applied.
    """
    filepath = filepath or CONFIG_RUN_ENV
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"Config file not found at: {filepath}")
    config = parse_config(dotenv_values(filepath))

    env_seed = os.getenv('DIVER_SEED', DIVER_SEED)
    if env_seed and overrides.get('seed') is None:
        overrides['seed'] = _parse_value('seed', env_seed, 0)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        config = dataclasses.replace(config, **overrides)
        validate_config(config)
    return config


def config_hash(config: RunConfig, names: Tuple[str, ...] = SCENE_FIELDS) -> str:
    """sha256 over the canonical listing of the given fields"""
    lines = []
    for name in sorted(names):
        value = getattr(config, name)
        if isinstance(value, tuple):
            value = ','.join(value)
        lines.append(f'{name}={value!r}')
    return hashlib.sha256('\n'.join(lines).encode('utf-8')).hexdigest()


def configure_logging(level: str = DIVER_LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
