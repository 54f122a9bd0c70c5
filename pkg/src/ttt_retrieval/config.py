"""Experiment configuration: defaults, JSON round-trip, dotted overrides.

A config is a nested set of flat sections. Every leaf has a default, so an
empty file (or none at all) is a valid experiment. `--section.leaf value`
command-line overrides address leaves by dotted path. Section seeds default
to the top-level seed so one flag reseeds the whole pipeline.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import get_args, get_origin, get_type_hints

from .errors import ConfigError
from .imaging import AugmentConfig
from .model import TaskSpec
from .optimizer import TTTConfig


@dataclass
class DatasetSection:
    manifest: str | None = None  # point at an existing dataset instead
    n_classes: int = 12
    n_domains: int = 4
    per_cell: int = 50
    image_size: int = 36
    seed: int | None = None
    unseen_fraction: float = 1 / 3
    holdout_domain: int = 1
    gallery_domain: int = 0
    split_seed: int | None = None


@dataclass
class ModelSection:
    hidden: int = 256
    embed_dim: int = 64
    head_k: int = 4


@dataclass
class PretrainSection:
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 64
    seed: int | None = None


@dataclass
class TttSection:
    task: str = "rotnet"
    k: int = 0  # 0 = task default (4 rotations / 31 permutations)
    lam: float = 0.005
    head_lr: float = 1e-5
    backbone_lr_ratio: float = 0.1
    batch_size: int = 64
    epochs: int = 1
    seed: int | None = None
    force_lr: bool = False
    crop_lo: float = 0.6
    crop_hi: float = 1.0
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4


@dataclass
class EvalSection:
    k: int = 200
    modes: list[str] = field(
        default_factory=lambda: ["non_generalized", "generalized"])
    metric: str = "sq_euclidean"
    workers: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/exp"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    ttt: TttSection = field(default_factory=TttSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # Section seeds fall back to the master seed when unset.
    def dataset_seed(self) -> int:
        return self.seed if self.dataset.seed is None else self.dataset.seed

    def split_seed(self) -> int:
        return (self.dataset_seed() if self.dataset.split_seed is None
                else self.dataset.split_seed)

    def pretrain_seed(self) -> int:
        return self.seed if self.pretrain.seed is None else self.pretrain.seed

    def ttt_seed(self) -> int:
        return self.seed if self.ttt.seed is None else self.ttt.seed


_SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "ttt": TttSection,
    "eval": EvalSection,
}


def _check_leaf(value, hint, where: str):
    origin = get_origin(hint)
    if origin is None:
        if hint is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number, got {value!r}")
            return float(value)
        if hint is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
            return value
        if hint is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected true/false, got {value!r}")
            return value
        if hint is str:
            if not isinstance(value, str):
                raise ConfigError(f"{where}: expected a string, got {value!r}")
            return value
        raise ConfigError(f"{where}: unsupported field type {hint}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        (item_hint,) = get_args(hint)
        return [_check_leaf(v, item_hint, f"{where}[{i}]")
                for i, v in enumerate(value)]
    # The only unions in the schema are X | None.
    members = [a for a in get_args(hint) if a is not type(None)]
    if value is None:
        return None
    return _check_leaf(value, members[0], where)


def _section_from_dict(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {data!r}")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {section}.{key}")
        kwargs[key] = _check_leaf(value, hints[key], f"{section}.{key}")
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object, got {data!r}")
    cfg = ExperimentConfig()
    for key, value in data.items():
        if key == "seed":
            cfg.seed = _check_leaf(value, int, "seed")
        elif key == "out":
            cfg.out = _check_leaf(value, str, "out")
        elif key in _SECTIONS:
            setattr(cfg, key, _section_from_dict(_SECTIONS[key], value, key))
        else:
            raise ConfigError(f"unknown config key {key}")
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2)
        f.write("\n")


def apply_override(data: dict, path: str, raw: str) -> None:
    """Set one leaf addressed by a dotted path; the value parses as JSON
    when possible and falls back to a plain string."""
    parts = path.split(".")
    defaults = config_to_dict(ExperimentConfig())
    probe = defaults
    node = data
    for p in parts[:-1]:
        if not isinstance(probe, dict) or p not in probe:
            raise ConfigError(f"unknown config key {path}")
        probe = probe[p]
        node = node.setdefault(p, {})
    leaf = parts[-1]
    if not isinstance(probe, dict) or leaf not in probe:
        raise ConfigError(f"unknown config key {path}")
    if isinstance(probe[leaf], dict):
        raise ConfigError(f"config key {path} is not a leaf")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[leaf] = value


def resolve_effective(cfg: ExperimentConfig) -> ExperimentConfig:
    """A copy with every deferred seed made explicit; echoing this config
    and re-running from the echo reproduces the run bit-exactly."""
    effective = config_from_dict(config_to_dict(cfg))
    effective.dataset.split_seed = cfg.split_seed()
    effective.dataset.seed = cfg.dataset_seed()
    effective.pretrain.seed = cfg.pretrain_seed()
    effective.ttt.seed = cfg.ttt_seed()
    return effective


def make_augment_config(cfg: ExperimentConfig) -> AugmentConfig:
    t = cfg.ttt
    return AugmentConfig(crop_scale=(t.crop_lo, t.crop_hi), flip_p=t.flip_p,
                         brightness=t.brightness, contrast=t.contrast,
                         saturation=t.saturation)


def make_task_spec(cfg: ExperimentConfig, kind: str | None = None) -> TaskSpec:
    chosen = kind or cfg.ttt.task
    # A configured k applies only to the configured task; other kinds fall
    # back to their own defaults.
    k = cfg.ttt.k if chosen == cfg.ttt.task else 0
    return TaskSpec(kind=chosen, k=k, lam=cfg.ttt.lam)


def make_ttt_config(cfg: ExperimentConfig, kind: str | None = None) -> TTTConfig:
    t = cfg.ttt
    return TTTConfig(task=make_task_spec(cfg, kind), head_lr=t.head_lr,
                     backbone_lr_ratio=t.backbone_lr_ratio,
                     batch_size=t.batch_size, epochs=t.epochs,
                     seed=cfg.ttt_seed(), augment=make_augment_config(cfg),
                     force_lr=t.force_lr)
