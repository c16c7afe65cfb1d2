"""Synthetic task distribution and n-shot k-way episode sampler.

A task places ``k`` class means on a circle in a 2-D latent plane, rotated by
a per-task angle (plus optional per-class jitter). Raw inputs are noisy draws
around those means, padded with pure-noise dimensions up to ``input_dim``,
and pushed through a frozen random-feature backbone.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidArgument
from .seeding import derive_seed


@dataclass(frozen=True)
class TaskDistributionConfig:
    input_dim: int = 2
    k: int = 5
    angle_range: tuple = (0.0, 2 * np.pi)
    radius_range: tuple = (1.0, 1.0)
    class_jitter: float = 0.0
    noise_scale: float = 0.3
    d_feat: int = 16
    backbone_seed: int = 1234
    backbone_gain: float = 1.5
    backbone_bias: float = 1.0
    label_noise: float = 0.0

    def __post_init__(self):
        if self.k < 2:
            raise InvalidArgument("k must be at least 2")
        if self.input_dim < 2:
            raise InvalidArgument("input_dim must be at least 2 (the latent plane)")
        if self.noise_scale <= 0:
            raise InvalidArgument("noise_scale must be positive")
        if self.d_feat < 1:
            raise InvalidArgument("d_feat must be positive")
        if not 0.0 <= self.label_noise < 1.0:
            raise InvalidArgument("label_noise must lie in [0, 1)")
        object.__setattr__(self, "angle_range", tuple(float(a) for a in self.angle_range))
        object.__setattr__(self, "radius_range", tuple(float(a) for a in self.radius_range))
        lo, hi = self.angle_range
        if hi < lo:
            raise InvalidArgument("angle_range must be (low, high) with low <= high")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise InvalidArgument("radius_range must be positive and ordered")

    @property
    def adapter_dim(self) -> int:
        return self.k * self.d_feat + self.k

    def with_features(self, d_feat: int) -> "TaskDistributionConfig":
        """Same tasks and raw inputs, different backbone width."""
        d = asdict(self)
        d["d_feat"] = d_feat
        return TaskDistributionConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angle_range"] = list(self.angle_range)
        d["radius_range"] = list(self.radius_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskDistributionConfig":
        return cls(**d)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    angle: float
    radius: float
    class_offsets: tuple
    seed: int

    def class_means(self) -> np.ndarray:
        k = len(self.class_offsets)
        ang = self.angle + 2 * np.pi * np.arange(k) / k + np.asarray(self.class_offsets)
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass
class Episode:
    task: TaskSpec
    n: int
    k: int
    seed: int
    support_raw: np.ndarray
    support_y: np.ndarray
    query_raw: np.ndarray
    query_y: np.ndarray
    support_x: np.ndarray = field(repr=False)
    query_x: np.ndarray = field(repr=False)

    def without_query(self) -> "Episode":
        empty = np.zeros((0,) + self.query_raw.shape[1:])
        return Episode(self.task, self.n, self.k, self.seed, self.support_raw,
                       self.support_y, empty, np.zeros(0, dtype=np.int64),
                       self.support_x, np.zeros((0, self.support_x.shape[1])))


def sample_task(config: TaskDistributionConfig, seed: int, task_id: int = 0) -> TaskSpec:
    rng = np.random.default_rng(seed)
    lo, hi = config.angle_range
    angle = float(rng.uniform(lo, hi)) if hi > lo else lo
    rlo, rhi = config.radius_range
    radius = float(rng.uniform(rlo, rhi)) if rhi > rlo else rlo
    j = config.class_jitter
    offsets = rng.uniform(-j, j, size=config.k) if j > 0 else np.zeros(config.k)
    return TaskSpec(int(task_id), angle, radius, tuple(float(o) for o in offsets), int(seed))


@lru_cache(maxsize=16)
def _backbone(input_dim, d_feat, seed, gain, bias_scale):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d_feat, input_dim)) * gain / np.sqrt(input_dim)
    b = rng.uniform(-bias_scale, bias_scale, size=d_feat)
    w.setflags(write=False)
    b.setflags(write=False)
    return w, b


def backbone_weights(config: TaskDistributionConfig):
    return _backbone(config.input_dim, config.d_feat, config.backbone_seed,
                     config.backbone_gain, config.backbone_bias)


def featurize(config: TaskDistributionConfig, raw_input) -> np.ndarray:
    """Frozen backbone ``tanh(W x + b)``; accepts one input or a batch of rows."""
    x = np.asarray(raw_input, dtype=np.float64)
    if x.shape[-1] != config.input_dim:
        raise InvalidArgument(f"raw input dim {x.shape[-1]} != {config.input_dim}")
    w, b = backbone_weights(config)
    return np.tanh(x @ w.T + b)


def _draw(config, task, per_class, rng):
    k = config.k
    means = task.class_means()
    y = np.repeat(np.arange(k), per_class)
    raw = rng.standard_normal((k * per_class, config.input_dim)) * config.noise_scale
    raw[:, :2] += means[y]
    if config.label_noise > 0:
        flip = rng.random(len(y)) < config.label_noise
        shift = rng.integers(1, k, size=len(y))
        y = np.where(flip, (y + shift) % k, y)
    return raw, y


def sample_episode(config: TaskDistributionConfig, task: TaskSpec, n: int,
                   query_per_class: int, seed: int, k: int | None = None) -> Episode:
    """``n`` support and ``query_per_class`` query examples per class.

    Support and query come from independent streams derived from ``seed``.
    With label noise the per-class counts refer to the clean class.
    """
    if k is not None and k != config.k:
        raise InvalidArgument(f"episode way {k} != distribution k {config.k}")
    if n < 1 or query_per_class < 0:
        raise InvalidArgument("need n >= 1 shots and a nonnegative query size")
    s_rng = np.random.default_rng(derive_seed(seed, "support"))
    q_rng = np.random.default_rng(derive_seed(seed, "query"))
    s_raw, s_y = _draw(config, task, n, s_rng)
    q_raw, q_y = _draw(config, task, query_per_class, q_rng)
    return Episode(task, n, config.k, int(seed), s_raw, s_y, q_raw, q_y,
                   featurize(config, s_raw), featurize(config, q_raw))


def _b64(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    dtype = "<f8" if a.dtype.kind == "f" else "<i8"
    return {"dtype": dtype, "shape": list(a.shape),
            "data": base64.b64encode(a.astype(dtype).tobytes()).decode()}


def _unb64(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype=d["dtype"]).reshape(d["shape"]).copy()


def episode_to_json(ep: Episode) -> str:
    rec = {
        "task": asdict(ep.task), "n": ep.n, "k": ep.k, "seed": ep.seed,
        "support_raw": _b64(ep.support_raw), "support_y": _b64(ep.support_y),
        "query_raw": _b64(ep.query_raw), "query_y": _b64(ep.query_y),
        "support_x": _b64(ep.support_x), "query_x": _b64(ep.query_x),
    }
    return json.dumps(rec, sort_keys=True)


def episode_from_json(line: str) -> Episode:
    rec = json.loads(line)
    t = rec["task"]
    task = TaskSpec(t["task_id"], t["angle"], t["radius"], tuple(t["class_offsets"]), t["seed"])
    return Episode(task, rec["n"], rec["k"], rec["seed"],
                   _unb64(rec["support_raw"]), _unb64(rec["support_y"]),
                   _unb64(rec["query_raw"]), _unb64(rec["query_y"]),
                   _unb64(rec["support_x"]), _unb64(rec["query_x"]))


def write_episodes(path, episodes) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(episode_to_json(ep) + "\n")


def read_episodes(path) -> list:
    with open(path) as fh:
        return [episode_from_json(line) for line in fh if line.strip()]
