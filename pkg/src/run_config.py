"""
Run configuration files
Flat key=value text with dotted namespaces, parsed with python-dotenv and coerced onto dataclasses
"""
import io
import typing
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from dotenv import dotenv_values

from .data import ToySpec
from .distill import DistillConfig
from .error_reporter import ConfigError
from .head import HeadConfig
from .optimizer import OptimConfig
from .views import ViewConfig
from .vit import ViTConfig

T = TypeVar('T')

PRECISION_CHOICES = ('float32', 'float64')


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    precision: str = 'float32'
    checkpoint_every: int = 10
    eval_every: int = 5
    eval_k: int = 20
    eval_tau: float = 0.07
    eval_layers: int = 1
    eval_train_samples: int = 0
    collapse_kl_threshold: float = 1e-3
    collapse_patience: int = 200
    out_dir: str = 'runs/toy'

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"train.seed must be >= 0, got {self.seed}")
        if self.precision not in PRECISION_CHOICES:
            raise ConfigError(f"train.precision must be one of {PRECISION_CHOICES}, got {self.precision!r}")
        if self.checkpoint_every < 0 or self.eval_every < 0 or self.eval_train_samples < 0:
            raise ConfigError("train.checkpoint_every, train.eval_every and train.eval_train_samples must be >= 0")
        if self.eval_k < 1 or self.eval_tau <= 0 or self.eval_layers < 1:
            raise ConfigError("train.eval_k and train.eval_layers must be >= 1 and train.eval_tau > 0")
        if self.collapse_patience < 1:
            raise ConfigError(f"train.collapse_patience must be >= 1, got {self.collapse_patience}")


@dataclass(frozen=True)
class DataConfig:
    train_path: str = 'data/train.dsv'
    test_path: str = ''


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.views.check_patch_size(self.model.patch_size)
        if self.train.eval_layers > self.model.depth:
            raise ConfigError(
                f"train.eval_layers={self.train.eval_layers} exceeds model.depth={self.model.depth}"
            )

    def replace(self, **sections: Any) -> 'RunConfig':
        """Copy with whole sections swapped, e.g. replace(train=new_train)"""
        return RunConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **sections})


NAMESPACES: Dict[str, Type] = {f.name: f.default_factory for f in fields(RunConfig)}


# ---------------------------------------------------------------------------
# Value coercion
# ---------------------------------------------------------------------------

def _coerce(key: str, raw: Optional[str], target: Any) -> Any:
    if raw is None:
        raise ConfigError(f"{key} has no value")
    text = raw.strip()
    try:
        if target is bool:
            lowered = text.lower()
            if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(text)
            return lowered in ('true', '1', 'yes')
        if target is int:
            return int(text)
        if target is float:
            return float(text)
        if target is str:
            return text
        if typing.get_origin(target) is tuple:
            item_type = typing.get_args(target)[0]
            return tuple(_coerce(key, part, item_type) for part in text.split(',') if part.strip())
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(target, '__name__', target)}") from e
    raise ConfigError(f"{key}: unsupported field type {target}")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ','.join(_format(v) for v in value)
    return str(value)


def build_section(cls: Type[T], prefix: str, values: Mapping[str, Optional[str]]) -> T:
    """Instantiate `cls` from the `prefix.field` entries of `values`; other fields keep defaults"""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        namespace, _, name = key.partition('.')
        if namespace != prefix:
            continue
        if name not in known:
            raise ConfigError(f"unknown config key {key}")
        kwargs[name] = _coerce(key, raw, hints[name])
    return cls(**kwargs)


def dump_section(obj: Any, prefix: str) -> str:
    return ''.join(f"{prefix}.{f.name}={_format(getattr(obj, f.name))}\n" for f in fields(obj))


# ---------------------------------------------------------------------------
# Run configs
# ---------------------------------------------------------------------------

def parse_run_config(text: str) -> RunConfig:
    values = dotenv_values(stream=io.StringIO(text), interpolate=False)
    for key in values:
        namespace = key.partition('.')[0]
        if namespace not in NAMESPACES:
            raise ConfigError(f"unknown config key {key}")
    sections = {name: build_section(cls, name, values) for name, cls in NAMESPACES.items()}
    return RunConfig(**sections)


def load_run_config(path: str) -> RunConfig:
    with open(path, 'r', encoding='utf-8') as handle:
        return parse_run_config(handle.read())


def dump_run_config(config: RunConfig) -> str:
    """Every field of every section, in declaration order; parse_run_config inverts it"""
    return ''.join(dump_section(getattr(config, name), name) for name in NAMESPACES)


def save_run_config(config: RunConfig, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(dump_run_config(config))


# ---------------------------------------------------------------------------
# Toy dataset specs
# ---------------------------------------------------------------------------

def parse_toy_spec(text: str) -> ToySpec:
    values = dotenv_values(stream=io.StringIO(text), interpolate=False)
    for key in values:
        if key.partition('.')[0] != 'toy':
            raise ConfigError(f"unknown toy spec key {key}")
    return build_section(ToySpec, 'toy', values)


def load_toy_spec(path: str) -> ToySpec:
    with open(path, 'r', encoding='utf-8') as handle:
        return parse_toy_spec(handle.read())


def dump_toy_spec(spec: ToySpec) -> str:
    return dump_section(spec, 'toy')
