"""Per-task adapter training and the model-zoo file format.

An adapter is a linear classification head over backbone features, stored
flat as ``[W.ravel(), b]`` with ``W`` of shape ``(k, d_feat)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError, InvalidArgument, TrainingFailure
from .numerics import OptimizerState, optimizer_step
from .seeding import derive_seed
from .taskgen import TaskDistributionConfig, sample_episode, sample_task

log = logging.getLogger(__name__)

ZOO_MAGIC = b"STZO"
ZOO_VERSION = 1
_HEADER = struct.Struct("<4sHIIB9x")
_DTYPE_F32 = 1


@dataclass
class AdapterVector:
    values: np.ndarray
    task_id: int | None = None
    provenance: str = "trained"

    @property
    def d(self) -> int:
        return int(self.values.shape[0])


def unpack_head(theta, k: int):
    theta = np.asarray(theta, dtype=np.float64)
    d_feat = theta.shape[-1] // k - 1
    if theta.shape[-1] != k * d_feat + k:
        raise InvalidArgument(f"adapter length {theta.shape[-1]} does not fit a {k}-way head")
    w = theta[..., : k * d_feat].reshape(theta.shape[:-1] + (k, d_feat))
    return w, theta[..., k * d_feat:]


def head_logits(theta, x, k: int):
    """Logits ``x W^T + b``. A stack of adapters ``(M, d)`` gives ``(M, n, k)``."""
    w, b = unpack_head(theta, k)
    x = np.asarray(x, dtype=np.float64)
    if w.shape[-1] != x.shape[-1]:
        raise InvalidArgument(f"adapter expects {w.shape[-1]} features, got {x.shape[-1]}")
    if w.ndim == 2:
        return x @ w.T + b
    return np.einsum("nf,mkf->mnk", x, w) + b[:, None, :]


def head_predict(theta, x, k: int):
    return head_logits(theta, x, k).argmax(-1)


def softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def head_loss_and_grad(theta, x, y, k: int, l2: float = 0.0):
    """Mean cross-entropy plus ``l2/2 * ||W||^2``, and its gradient w.r.t. ``theta``."""
    w, _ = unpack_head(theta, k)
    z = head_logits(theta, x, k)
    zs = z - z.max(1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * float((w * w).sum())
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    gw = dz.T @ x + l2 * w
    gb = dz.sum(0)
    return float(loss), np.concatenate([gw.ravel(), gb])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 0.05
    optimizer: str = "adam"
    l2: float = 1e-3
    seed: int = 0


def train_head(x, y, k: int, config: TrainConfig = TrainConfig(), init=None) -> np.ndarray:
    """Full-batch training of a linear head; zero initialization by default."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise InvalidArgument("empty support set")
    d = k * x.shape[1] + k
    theta = np.zeros(d) if init is None else np.array(init, dtype=np.float64)
    state = OptimizerState(algorithm=config.optimizer, lr=config.lr)
    for epoch in range(config.epochs):
        loss, grad = head_loss_and_grad(theta, x, y, k, config.l2)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingFailure(f"non-finite loss at epoch {epoch}", last_state=theta)
        theta, state = optimizer_step(state, theta, grad)
    return theta


def train_adapter(episode, config: TrainConfig = TrainConfig(), features=None) -> AdapterVector:
    """Fit the head on the episode's support set.

    ``features`` overrides ``episode.support_x`` (e.g. a wider backbone).
    """
    x = episode.support_x if features is None else features
    theta = train_head(x, episode.support_y, episode.k, config)
    return AdapterVector(theta, task_id=episode.task.task_id, provenance="trained")


@dataclass
class ModelZoo:
    matrix: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise InvalidArgument("zoo matrix must be N x d with N >= 1")
        self.manifest.setdefault("N", int(self.matrix.shape[0]))
        self.manifest.setdefault("d", int(self.matrix.shape[1]))

    @property
    def N(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def d(self) -> int:
        return int(self.matrix.shape[1])


@dataclass(frozen=True)
class ZooConfig:
    shots: int = 16
    train: TrainConfig = TrainConfig()
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _zoo_job(args):
    dist, zoo_cfg, i = args
    task_seed = derive_seed(zoo_cfg.seed, "zoo-task", i)
    task = sample_task(dist, task_seed, task_id=i)
    ep = sample_episode(dist, task, zoo_cfg.shots, 0, derive_seed(zoo_cfg.seed, "zoo-episode", i))
    try:
        theta = train_head(ep.support_x, ep.support_y, dist.k, zoo_cfg.train)
    except TrainingFailure as exc:
        exc.task_id = i
        raise
    return theta, task_seed


def build_zoo(dist_config: TaskDistributionConfig, N: int, zoo_config: ZooConfig = ZooConfig()) -> ModelZoo:
    if N < 1:
        raise InvalidArgument("zoo size N must be at least 1")
    jobs = [(dist_config, zoo_config, i) for i in range(N)]
    if zoo_config.workers > 1:
        with ProcessPoolExecutor(zoo_config.workers) as pool:
            out = list(pool.map(_zoo_job, jobs, chunksize=max(1, N // (4 * zoo_config.workers))))
    else:
        out = [_zoo_job(j) for j in jobs]
    matrix = np.stack([theta for theta, _ in out])
    cfg = {"dist": dist_config.to_dict(), "zoo": {k: v for k, v in zoo_config.to_dict().items()
                                                  if k != "workers"}}
    manifest = {
        "N": N, "d": int(matrix.shape[1]), "task_ids": list(range(N)),
        "seeds": [s for _, s in out], "config_hash": config_hash(cfg), "config": cfg,
        "kind": "zoo",
    }
    log.info("built zoo N=%d d=%d", N, matrix.shape[1])
    return ModelZoo(matrix, manifest)


def save_zoo(zoo: ModelZoo, path) -> None:
    manifest = dict(zoo.manifest, N=zoo.N, d=zoo.d)
    header = _HEADER.pack(ZOO_MAGIC, ZOO_VERSION, zoo.d, zoo.N, _DTYPE_F32)
    body = np.ascontiguousarray(zoo.matrix, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
        fh.write(json.dumps(manifest, sort_keys=True).encode())


def load_zoo(path) -> ModelZoo:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    magic, version, d, n, dtype = _HEADER.unpack_from(blob)
    if magic != ZOO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != ZOO_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype tag {dtype}")
    end = _HEADER.size + 4 * n * d
    if len(blob) < end:
        raise CorruptionError(f"{path}: truncated matrix ({len(blob)} < {end} bytes)")
    try:
        manifest = json.loads(blob[end:].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable manifest") from exc
    if manifest.get("N") != n or manifest.get("d") != d:
        raise CorruptionError(f"{path}: manifest N/d {manifest.get('N')}/{manifest.get('d')} "
                              f"!= header {n}/{d}")
    matrix = np.frombuffer(blob, dtype="<f4", count=n * d, offset=_HEADER.size)
    return ModelZoo(matrix.reshape(n, d).astype(np.float64), manifest)
