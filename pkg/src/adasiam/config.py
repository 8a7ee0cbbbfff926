"""Run configuration: dataclass tree plus strict YAML loading.

Unknown keys anywhere in the file are rejected so a typo cannot silently
fall back to a default.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from .geometry import SamplerConfig
from .matcher import MatcherConfig
from .motion import LrnConfig, MotionConfig
from .weighting import WeightingConfig


class ConfigError(ValueError):
    """Bad configuration file or incompatible settings."""


@dataclass
class TrainingConfig:
    """Offline training of the matcher branch and the motion feature stage."""

    siamese_epochs: int = 10
    siamese_lr: float = 1e-4
    siamese_momentum: float = 0.9
    siamese_weight_decay: float = 5e-4
    pairs_per_sequence: int = 8
    rois_per_pair: int = 8
    pair_pos_iou: float = 0.7
    pair_neg_iou: float = 0.5
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-3
    pretrain_windows: int = 6


@dataclass
class TrackerConfig:
    """Everything the online loop needs; defaults are the desk-scale run."""

    score_gate: float = 1.6
    warmup_frames: int = 4
    tau_long: int = 100
    tau_short: int = 20
    tau_interval: int = 10
    eta: float = 0.7
    buffer_capacity: int = 35
    n_init_pos: int = 500
    n_init_neg: int = 5000
    n_update_pos: int = 50
    n_update_neg: int = 200
    pos_iou: float = 0.7
    neg_iou_init: float = 0.3
    neg_iou_update: float = 0.3
    motion_pos_init: int = 5
    motion_pos_update: int = 5
    motion_epochs_init: int = 30
    motion_epochs_update: int = 10
    weighting_epochs_init: int = 30
    weighting_epochs_update: int = 10
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.tau_short > self.tau_long:
            raise ConfigError("tau_short must not exceed tau_long")
        for name in ("n_init_pos", "n_init_neg", "n_update_pos", "n_update_neg",
                     "motion_pos_init", "motion_pos_update"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


_TUPLE_FIELDS = {"channels", "sublayers", "head_lr_multipliers", "target_size"}
_NESTED = {
    "sampler": SamplerConfig,
    "matcher": MatcherConfig,
    "motion": MotionConfig,
    "weighting": WeightingConfig,
    "training": TrainingConfig,
    "lrn": LrnConfig,
}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = path or "config"
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _build(_NESTED[key], value, sub)
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data):
    return _build(TrackerConfig, data or {}, "")


def load_config(path):
    """Parse a YAML config file into a TrackerConfig."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def config_to_dict(cfg):
    """Plain-dict snapshot of a config (for run manifests)."""
    return dataclasses.asdict(cfg)
