"""Benchmark configuration: nested dataclasses loaded from a versioned JSON file."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass

from .bounds import PacBayesOptConfig
from .diffusion import DiffusionConfig
from .errors import ConfigError
from .select import HierConfig
from .taskgen import TaskDistributionConfig
from .zoo import TrainConfig

CONFIG_VERSION = 1

ALL_METHODS = ("steel", "model-zoo", "union", "sgd-baseline", "vanilla-pb")


@dataclass(frozen=True)
class BenchConfig:
    version: int = CONFIG_VERSION
    master_seed: int = 0
    dist: TaskDistributionConfig = TaskDistributionConfig(class_jitter=0.4, radius_range=(0.7, 1.3))
    zoo_n: int = 500
    zoo_shots: int = 16
    zoo_train: TrainConfig = TrainConfig()
    diffusion: DiffusionConfig = DiffusionConfig(hidden=256, lr=2e-3, epochs=3000, stage2_epochs=1000)
    n_samples: int = 2000
    shots: tuple = (1, 2, 4, 8, 16)
    episodes_per_shot: int = 40
    query_per_class: int = 400
    epsilon: float = 0.05
    loss: str = "zero_one"
    methods: tuple = ALL_METHODS
    search: str = "exhaustive"
    hier: HierConfig = HierConfig()
    baseline_d_feat: int = 512
    baseline_train: TrainConfig = TrainConfig()
    baseline_bound: str = "best-case"
    quant_levels: int = 16
    pacbayes: PacBayesOptConfig = PacBayesOptConfig()
    workers: int = 1

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")
        if self.search not in ("exhaustive", "hierarchical"):
            raise ConfigError(f"unknown search {self.search!r}")
        if self.baseline_bound not in ("best-case", "coded"):
            raise ConfigError(f"unknown baseline bound {self.baseline_bound!r}")
        if self.episodes_per_shot < 1:
            raise ConfigError("need at least one episode per shot setting")
        object.__setattr__(self, "shots", tuple(int(s) for s in self.shots))
        object.__setattr__(self, "methods", tuple(self.methods))


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def from_dict(cls, data: dict):
    """Build dataclass ``cls`` from a (possibly partial) dict, recursing into
    nested dataclass fields. Unknown keys are a config error."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(extra)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = from_dict(hint, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def load_config(path) -> BenchConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(BenchConfig, data)


def dump_config(cfg, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
