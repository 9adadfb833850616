"""Run configuration: dataclass sections, YAML files and ``key=value`` overrides.

A config file is a YAML mapping with up to three sections::

    train:     fields of TrainConfig (with nested ``weights`` and ``augment``)
    generate:  fields of GenerateConfig (with nested ``flow`` and ``transform``)
    evaluate:  fields of EvalConfig

Overrides use dotted paths, for example ``train.learning_rate=1e-4`` or
``generate.flow.max_magnitude=6``; values are parsed as YAML scalars.
"""

import dataclasses
from dataclasses import dataclass, field
import typing

import yaml

from .errors import ConfigError
from .flowmodule import DEFAULT_ENCODER_WIDTHS, DEFAULT_ESTIMATOR_WIDTHS, DEFAULT_RADIUS
from .losses import LossWeights
from .synthdata import AugmentConfig, FlowSpec, SpectralTransform


OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 4.3e-5
    momentum: float = 0.9
    # "sgd" (with momentum) or "adam"; Adam ignores ``momentum``.
    optimizer: str = "sgd"
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 1000
    checkpoint_every: int = 250
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    feature_layer: str = "relu3_3"
    feature_backbone: str = "auto"
    grad_clip: float = 100.0
    # Model architecture.  spectra maps tag -> channel count; None means
    # "take it from the training data".
    spectra: dict = None
    encoder_widths: tuple = DEFAULT_ENCODER_WIDTHS
    estimator_widths: tuple = DEFAULT_ESTIMATOR_WIDTHS
    radius: int = DEFAULT_RADIUS
    finest_level: int = 2

    def __post_init__(self):
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise ConfigError(f"batch_size must be an integer >= 1, got {self.batch_size!r}", key="train.batch_size")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}", key="train.learning_rate")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}", key="train.momentum")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}", key="train.optimizer")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0", key="train.iterations")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1", key="train.checkpoint_every")
        if not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0", key="train.grad_clip")


@dataclass
class GenerateConfig:
    n: int = 10
    height: int = 128
    width: int = 128
    seed: int = 0
    spectrum_a: str = "rgb"
    flow: FlowSpec = field(default_factory=lambda: FlowSpec("smooth", max_magnitude=8.0))
    transform: SpectralTransform = field(default_factory=lambda: SpectralTransform("gray_invert_blur"))
    # Annotations written next to each pair.
    masks: bool = False
    points: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise ConfigError("n must be >= 0", key="generate.n")
        if self.height < 1 or self.width < 1:
            raise ConfigError("image dims must be positive", key="generate.height")
        if self.points < 0:
            raise ConfigError("points must be >= 0", key="generate.points")


@dataclass
class EvalConfig:
    threshold: float = 0.5
    # Score point correspondences on the horizontal component only.
    u_only: bool = False

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must be in (0, 1)", key="evaluate.threshold")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)


def _convert(value, hint, key):
    if dataclasses.is_dataclass(hint):
        return from_dict(hint, value, key)
    if hint is tuple and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if hint is float and isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string.
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"expected float, got {value!r}", key=key) from None
    if hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if hint is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if hint in (int, float, bool, str) and value is not None and not isinstance(value, hint):
        raise ConfigError(f"expected {hint.__name__}, got {value!r}", key=key)
    return value


def from_dict(cls, data, prefix=""):
    """Build dataclass ``cls`` from a (possibly partial) mapping; unknown keys are errors."""
    if data is None:
        data = {}
    if dataclasses.is_dataclass(data):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", key=prefix or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if k not in names:
            raise ConfigError(f"unknown key; expected one of {sorted(names)}", key=key)
        kwargs[k] = _convert(v, hints.get(k), key)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if exc.key and prefix and not exc.key.startswith(prefix):
            raise ConfigError(exc.message, key=f"{prefix}.{exc.key.split('.')[-1]}") from None
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key=prefix or "<root>") from None


def to_dict(cfg):
    """Plain nested dict (tuples as lists) suitable for YAML/JSON."""
    def plain(v):
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(dataclasses.asdict(cfg))


# Mapping-valued fields replaced wholesale rather than merged key by key.
LEAF_MAPPINGS = ("spectra",)


def merge(base, update):
    """Recursive merge of ``update`` into a copy of ``base``."""
    out = dict(base)
    for k, v in (update or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in LEAF_MAPPINGS:
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(data, overrides):
    """Apply ``a.b.c=value`` strings to a nested dict in place and return it."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        key, raw = item.split("=", 1)
        key = key.strip()
        parts = key.split(".")
        if not all(parts):
            raise ConfigError("empty path component", key=key)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value {raw!r}: {exc}", key=key) from None
        node = data
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"{p!r} is not a section", key=key)
            node = nxt
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=None):
    """Read a YAML config (or defaults when ``path`` is None) and apply overrides."""
    data = {}
    if path is not None:
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", key="--config") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}", key="--config") from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", key="--config")
    # Snapshots written by the CLI carry a descriptive ``run`` section.
    data.pop("run", None)
    apply_overrides(data, overrides)
    return from_dict(RunConfig, merge(to_dict(RunConfig()), data))


def dump_config(cfg, path):
    with open(path, "w") as f:
        yaml.safe_dump(to_dict(cfg), f, sort_keys=True)
