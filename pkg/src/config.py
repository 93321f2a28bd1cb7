import os
import json
import hashlib
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, asdict, replace, is_dataclass

import yaml
from dotenv import load_dotenv

from .errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    """Configuration class for environment variables"""

    # Output locations
    OUTPUT_ROOT = os.getenv('CTXDIFF_OUTPUT_ROOT', 'runs')
    LOG_FILENAME = os.getenv('CTXDIFF_LOG_FILENAME', 'ctxdiff.log')

    # Runtime settings
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    DEVICE = os.getenv('CTXDIFF_DEVICE', 'cpu')
    DEFAULT_SEED = int(os.getenv('CTXDIFF_SEED', 0))

    # Persistence
    CHECKPOINT_VERSION = 1
    DEFAULT_CONFIG_PATH = os.getenv('CTXDIFF_CONFIG', os.path.join('configs', 'default.yaml'))

    @classmethod
    def validate_config(cls):
        """Validate environment-provided settings"""
        if cls.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigError(f"Invalid LOG_LEVEL: {cls.LOG_LEVEL}")
        if not cls.DEVICE.startswith(('cpu', 'cuda', 'mps')):
            raise ConfigError(f"Invalid CTXDIFF_DEVICE: {cls.DEVICE}")
        logger.debug("✓ Environment configuration validated")


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 2000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = 'beta'
    discrete_T: int = 100
    gamma_end: float = 0.9
    beta_uniform_end: float = 0.05
    clip_each_step: bool = False


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 1
    base_channels: int = 64
    channel_mults: tuple = (1, 2, 2)
    time_dim: int = 64
    num_tokens: int = 8
    token_dim: int = 16
    tap: str = 'penultimate'


@dataclass(frozen=True)
class ContextConfig:
    stride: int = 3
    q: int = 4
    decoder: str = 'distribution'
    set_loss: str = 'hungarian'
    normalize: bool = False
    hidden: tuple = (64, 64)
    lambda_mode: str = 'constant'
    lambda_value: float = 0.5
    lambda_start: float = 1.0
    lambda_end: float = 0.0
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 200
    sinkhorn_tol: float = 1e-6
    logvar_min: float = -10.0
    logvar_max: float = 4.0


@dataclass(frozen=True)
class DataConfig:
    source: str = 'blobs'
    path: str = ''
    n: int = 256
    size: int = 16
    batch_size: int = 16


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    lr: float = 9.6e-5
    point_loss: str = 'simple'
    log_every: int = 100
    checkpoint_every: int = 1000
    divergence_threshold: float = 1e6


@dataclass(frozen=True)
class InpaintConfig:
    T: int = 250
    r: int = 10
    j: int = 10


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 64
    extractor_seed: int = 0
    feature_dim: int = 32
    sample_steps: int = 0


_CHOICES = {
    'mode': ('continuous', 'discrete'),
    'schedule.variance': ('beta', 'posterior'),
    'model.tap': ('penultimate',),
    'context.decoder': ('distribution', 'feature'),
    'context.set_loss': ('hungarian', 'chamfer', 'sinkhorn'),
    'context.lambda_mode': ('constant', 'linear'),
    'data.source': ('blobs', 'checkerboard', 'two_mode', 'directory'),
    'train.point_loss': ('simple', 'mu'),
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; serialized into every checkpoint and report."""

    mode: str = 'continuous'
    seed: int = 0
    output_dir: str = ''
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data):
        """Build a validated config, rejecting unknown keys at every level."""
        config = _build(cls, data or {}, prefix='')
        config.validate()
        return config

    def to_dict(self):
        return _plain(asdict(self))

    def config_hash(self):
        """Content hash of the config, independent of output_dir."""
        payload = self.to_dict()
        payload.pop('output_dir', None)
        canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]

    def with_overrides(self, overrides):
        """Return a copy with dotted-key overrides applied (``{'context.stride': 1}``)."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            node = data
            parts = dotted.split('.')
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"Unknown config key: {dotted}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"Unknown config key: {dotted}")
            node[parts[-1]] = value
        return RunConfig.from_dict(data)

    def validate(self):
        for dotted, allowed in _CHOICES.items():
            value = _lookup(self, dotted)
            if value not in allowed:
                raise ConfigError(f"{dotted} must be one of {allowed}, got {value!r}")

        checks = [
            (self.schedule.T >= 1, 'schedule.T must be >= 1'),
            (0 < self.schedule.beta_start <= self.schedule.beta_end < 1,
             'schedule.beta_start/beta_end must satisfy 0 < start <= end < 1'),
            (self.schedule.discrete_T >= 1, 'schedule.discrete_T must be >= 1'),
            (0 <= self.schedule.gamma_end <= 1, 'schedule.gamma_end must be in [0, 1]'),
            (0 <= self.schedule.beta_uniform_end <= 1, 'schedule.beta_uniform_end must be in [0, 1]'),
            (self.schedule.gamma_end + self.schedule.beta_uniform_end <= 1,
             'schedule.gamma_end + schedule.beta_uniform_end must not exceed 1'),
            (self.model.channels >= 1, 'model.channels must be >= 1'),
            (self.model.base_channels >= 8 and self.model.base_channels % 8 == 0,
             'model.base_channels must be a positive multiple of 8'),
            (len(self.model.channel_mults) >= 1, 'model.channel_mults must not be empty'),
            (self.model.time_dim >= 2 and self.model.time_dim % 2 == 0, 'model.time_dim must be even'),
            (self.model.num_tokens >= 2, 'model.num_tokens must be >= 2'),
            (self.model.token_dim >= 1, 'model.token_dim must be >= 1'),
            (self.context.stride >= 0, 'context.stride must be >= 0'),
            (self.context.q >= 1, 'context.q must be >= 1'),
            (len(self.context.hidden) == 2, 'context.hidden must list two block widths'),
            (0 <= self.context.lambda_value <= 1, 'context.lambda_value must be in [0, 1]'),
            (0 <= self.context.lambda_start <= 1 and 0 <= self.context.lambda_end <= 1,
             'context.lambda_start/lambda_end must be in [0, 1]'),
            (self.context.sinkhorn_epsilon > 0, 'context.sinkhorn_epsilon must be > 0'),
            (self.context.logvar_min < self.context.logvar_max, 'context.logvar_min must be < logvar_max'),
            (self.data.n >= 1 and self.data.size >= 4 and self.data.batch_size >= 1,
             'data.n, data.size and data.batch_size must be positive (size >= 4)'),
            (self.data.source != 'directory' or bool(self.data.path), 'data.path is required for directory sources'),
            (self.train.steps >= 0 and self.train.lr >= 0, 'train.steps and train.lr must be non-negative'),
            (self.train.log_every >= 1 and self.train.checkpoint_every >= 1,
             'train.log_every and train.checkpoint_every must be >= 1'),
            (self.inpaint.T >= 1 and self.inpaint.r >= 1 and self.inpaint.j >= 1,
             'inpaint.T, inpaint.r and inpaint.j must be >= 1'),
            (self.inpaint.T <= self.schedule.T, 'inpaint.T must not exceed schedule.T'),
            (self.eval.n_samples >= 1 and self.eval.feature_dim >= 1, 'eval.n_samples and eval.feature_dim must be >= 1'),
            (0 <= self.eval.sample_steps <= self.schedule.T, 'eval.sample_steps must lie in [0, schedule.T]'),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

        downsamples = len(self.model.channel_mults) - 1
        if self.data.size % (2 ** downsamples) != 0:
            raise ConfigError(
                f"data.size={self.data.size} must be divisible by {2 ** downsamples} for {len(self.model.channel_mults)} resolutions"
            )


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"Config section '{prefix.rstrip('.') or '<root>'}' must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown config key(s): {', '.join(prefix + key for key in unknown)}")

    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, prefix=f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, default, prefix + name)
    return cls(**kwargs)


def _coerce(value, default, key):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError(type(value).__name__)
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError(type(value).__name__)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError('bool')
            return float(value)
        if isinstance(default, tuple):
            return tuple(type(default[0])(v) for v in value)
        if isinstance(default, str):
            return '' if value is None else str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for {key}: {value!r} ({e})") from e
    return value


def _lookup(config, dotted):
    node = config
    for part in dotted.split('.'):
        node = getattr(node, part)
    return node


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def read_config_file(path):
    """Read a YAML or TOML config file into a plain dict."""
    try:
        if path.endswith('.toml'):
            with open(path, 'rb') as f:
                return tomllib.load(f)
        with open(path, 'r', encoding='utf-8') as f:
            return yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except (yaml.YAMLError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Could not parse config file {path}: {e}") from e


def parse_override(assignment):
    """Parse ``section.key=value`` with the value read as a YAML scalar or list."""
    if '=' not in assignment:
        raise ConfigError(f"Override must look like key=value, got {assignment!r}")
    key, raw = assignment.split('=', 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse override value {raw!r}: {e}") from e
    return key.strip(), value


def load_run_config(path=None, overrides=None):
    """Load a RunConfig from a file (optional) and apply dotted-key overrides."""
    data = read_config_file(path) if path else {}
    config = RunConfig.from_dict(data)
    if overrides:
        config = config.with_overrides(overrides)
    if not config.output_dir:
        config = replace(config, output_dir=os.path.join(Config.OUTPUT_ROOT, f"{config.mode}-{config.config_hash()}"))
    logger.info("✓ Configuration loaded (hash %s)", config.config_hash())
    return config


def save_run_config(config, path):
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True)
    logger.info("✓ Config saved to %s", path)
