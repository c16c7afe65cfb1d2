"""DDPM over flat adapter vectors: schedule, time-conditioned MLP denoiser,
training with LAMB + EMA, ancestral sampling, and the checkpoint format."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import (CorruptionError, DegenerateZoo, FormatError, InvalidArgument,
                     NumericError)
from .hypothesis import HypothesisSet
from .numerics import MlpNet, OptimizerState, onecycle_lr, optimizer_step, sinusoidal_embed
from .seeding import derive_seed

log = logging.getLogger(__name__)

CKPT_MAGIC = b"STDF"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sHIIII2x")


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by timestep: entry 0 is the ``t = 0`` convention
    (``beta = 0``, ``alpha_bar = 1``), entries ``1..T`` are the real steps."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise InvalidArgument("T must be at least 1")
    if not 0 < beta_min < 1 or not 0 < beta_max < 1 or (T > 1 and not beta_min < beta_max):
        raise InvalidArgument(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_min, beta_max, T) if T > 1 else beta_min
    alphas = 1.0 - betas
    alpha_bars = np.exp(np.cumsum(np.log1p(-betas)))
    for a in (betas, alphas, alpha_bars):
        a.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bars)


def _check_t(t, schedule):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise InvalidArgument(f"timestep outside [1, {schedule.T}]")
    return t


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` scalar or per-row."""
    t = _check_t(t, schedule)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InvalidArgument("x0 and eps must have the same shape")
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def default_hidden(d: int, multiple: int | None = 512) -> int:
    """``4 d`` rounded to the nearest positive multiple (no rounding if ``multiple`` is falsy)."""
    h = 4 * d
    if not multiple:
        return h
    return max(multiple, int(round(h / multiple)) * multiple)


@dataclass(frozen=True)
class DenoiserConfig:
    d: int
    hidden: int | None = None
    hidden_multiple: int | None = 512
    n_hidden: int = 3
    time_mult: int = 4
    activation: str = "gelu"
    out_scale: float = 1.0

    @property
    def hidden_dim(self) -> int:
        return self.hidden if self.hidden else default_hidden(self.d, self.hidden_multiple)


class Denoiser:
    """epsilon-prediction MLP. Each hidden layer adds its own linear
    projection of a shared time embedding to its pre-activation."""

    def __init__(self, config: DenoiserConfig, params: dict):
        self.config = config
        h, d, L = config.hidden_dim, config.d, config.n_hidden
        act = config.activation
        self.main = MlpNet([d] + [h] * L + [d], [act] * L + ["identity"],
                           {k[5:]: v for k, v in params.items() if k.startswith("main.")})
        self.time = MlpNet([h, config.time_mult * h, h], [act, "identity"],
                           {k[5:]: v for k, v in params.items() if k.startswith("time.")})
        self.params = params

    @classmethod
    def init(cls, config: DenoiserConfig, rng: np.random.Generator) -> "Denoiser":
        h, d, L = config.hidden_dim, config.d, config.n_hidden
        main = MlpNet.init([d] + [h] * L + [d], [config.activation] * L + ["identity"], rng,
                           out_scale=config.out_scale)
        time = MlpNet.init([h, config.time_mult * h, h], [config.activation, "identity"], rng)
        params = {f"main.{k}": v for k, v in main.params.items()}
        params.update({f"time.{k}": v for k, v in time.params.items()})
        for i in range(L):
            params[f"proj{i}"] = rng.standard_normal((h, h)) / np.sqrt(h)
        return cls(config, params)

    def with_params(self, params: dict) -> "Denoiser":
        return Denoiser(self.config, params)

    def _time_features(self, t, keep):
        t = np.atleast_1d(np.asarray(t))
        uniq, inv = np.unique(t, return_inverse=True)
        emb = sinusoidal_embed(uniq, self.config.hidden_dim)
        if keep:
            te_u, cache = self.time.forward(emb)
        else:
            te_u, cache = self.time(emb), None
        return te_u, inv, cache

    def forward(self, x, t, _keep=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.config.d:
            raise InvalidArgument(f"input width {x.shape[-1]} != {self.config.d}")
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        te_u, inv, tcache = self._time_features(t, _keep)
        te = te_u[inv] if len(inv) > 1 else te_u
        inject = [te @ self.params[f"proj{i}"] for i in range(self.config.n_hidden)] + [None]
        if not _keep:
            out = self.main(x, inject)
            return out[0] if squeeze else out
        out, cache = self.main.forward(x, inject)
        return out, (cache, te, te_u, inv, tcache)

    def __call__(self, x, t):
        return self.forward(x, t)

    def loss_and_grad(self, x_t, t, eps):
        """Mean squared error over batch and dims, with gradients for every parameter."""
        out, (cache, te, te_u, inv, tcache) = self.forward(x_t, t, _keep=True)
        diff = out - eps
        loss = float((diff**2).mean())
        gmain, _, dinject = self.main.backward(cache, 2.0 * diff / diff.size)
        grads = {f"main.{k}": v for k, v in gmain.items()}
        dte = np.zeros_like(te)
        for i in range(self.config.n_hidden):
            grads[f"proj{i}"] = te.T @ dinject[i]
            dte += dinject[i] @ self.params[f"proj{i}"].T
        dte_u = np.zeros_like(te_u)
        np.add.at(dte_u, inv, dte)
        gtime, _, _ = self.time.backward(tcache, dte_u)
        grads.update({f"time.{k}": v for k, v in gtime.items()})
        return loss, grads


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    hidden: int | None = None
    hidden_multiple: int | None = 512
    out_scale: float = 1.0
    epochs: int = 3000
    stage2_epochs: int = 0
    batch_size: int = 1024
    optimizer: str = "lamb"
    lr: float = 0.01
    stage2_lr_start: float = 4e-4
    stage2_lr_max: float = 1e-3
    stage2_warmup: int = 1000
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    std_floor: float = 1e-6
    sampler_variance: str = "beta"
    seed: int = 0

    def denoiser_config(self, d: int) -> DenoiserConfig:
        return DenoiserConfig(d, self.hidden, self.hidden_multiple, out_scale=self.out_scale)


@dataclass
class DiffusionCheckpoint:
    config: DiffusionConfig
    d: int
    params: dict | None
    ema: dict
    mean: np.ndarray
    std: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.config.T, self.config.beta_min, self.config.beta_max)

    def denoiser(self, use_ema: bool = True) -> Denoiser:
        return Denoiser(self.config.denoiser_config(self.d), self.ema if use_ema else self.params)

    def normalize(self, theta):
        return (np.asarray(theta, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def digest(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def zoo_stats(matrix, floor: float = 1e-6):
    matrix = np.asarray(matrix, dtype=np.float64)
    std = matrix.std(0)
    if np.all(std == 0):
        raise DegenerateZoo("every zoo dimension is constant")
    return matrix.mean(0), np.maximum(std, floor)


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    return {k: decay * ema[k] + (1.0 - decay) * params[k] for k in params}


def train_diffusion(zoo, config: DiffusionConfig = DiffusionConfig(), callback=None) -> DiffusionCheckpoint:
    """Fit the epsilon-prediction objective on standardized zoo rows.

    ``zoo`` is a ``ModelZoo`` or a plain ``N x d`` matrix. ``callback(epoch,
    loss)`` is called once per epoch.
    """
    matrix = np.asarray(getattr(zoo, "matrix", zoo), dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise InvalidArgument("diffusion training needs at least two zoo rows")
    if not np.all(np.isfinite(matrix)):
        raise NumericError("zoo contains non-finite values")
    n, d = matrix.shape
    mean, std = zoo_stats(matrix, config.std_floor)
    data = (matrix - mean) / std
    schedule = make_schedule(config.T, config.beta_min, config.beta_max)
    rng = np.random.default_rng(derive_seed(config.seed, "diffusion-train"))
    net = Denoiser.init(config.denoiser_config(d), rng)
    params = net.params
    ema = {k: v.copy() for k, v in params.items()}
    state = OptimizerState(config.optimizer, lr=config.lr)
    steps_per_epoch = -(-n // config.batch_size)
    stage2_total = config.stage2_epochs * steps_per_epoch
    history = []
    total_epochs = config.epochs + config.stage2_epochs
    step = 0
    for epoch in range(total_epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = data[perm[start:start + config.batch_size]]
            t = rng.integers(1, config.T + 1, size=len(batch))
            eps = rng.standard_normal(batch.shape)
            x_t = q_sample(batch, t, eps, schedule)
            loss, grads = net.loss_and_grad(x_t, t, eps)
            if not np.isfinite(loss):
                ckpt = DiffusionCheckpoint(config, d, params, ema, mean, std,
                                           {"aborted_epoch": epoch, "loss_history": history})
                exc = NumericError(f"non-finite diffusion loss at epoch {epoch}")
                exc.checkpoint = ckpt
                raise exc
            if epoch < config.epochs:
                lr = config.lr
            else:
                lr = onecycle_lr(step - config.epochs * steps_per_epoch, stage2_total,
                                 config.stage2_lr_start, config.stage2_lr_max,
                                 warmup_steps=config.stage2_warmup)
            params, state = optimizer_step(state, params, grads, lr=lr)
            net = net.with_params(params)
            step += 1
            decay = config.ema_decay
            if config.ema_warmup:
                decay = min(decay, (1.0 + step) / (10.0 + step))
            ema = ema_update(ema, params, decay)
            epoch_loss += loss * len(batch)
        history.append(epoch_loss / n)
        if callback is not None:
            callback(epoch, history[-1])
        if epoch % 500 == 0:
            log.debug("diffusion epoch %d loss %.5f", epoch, history[-1])
    meta = {"epochs": config.epochs, "stage2_epochs": config.stage2_epochs,
            "optimizer": config.optimizer, "seed": config.seed, "steps": step,
            "loss_history": [float(x) for x in history], "n_train": n}
    return DiffusionCheckpoint(config, d, params, ema, mean, std, meta)


def ancestral_sample(denoiser, schedule: NoiseSchedule, x_T, rng, variance: str = "beta"):
    """Run the reverse chain from ``x_T`` down to ``t = 0`` in normalized space."""
    x = np.array(x_T, dtype=np.float64)
    for t in range(schedule.T, 0, -1):
        beta, alpha, ab = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
        eps = denoiser(x, t)
        x = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
        if t > 1:
            if variance == "beta":
                var = beta
            elif variance == "posterior":
                var = beta * (1.0 - schedule.alpha_bars[t - 1]) / (1.0 - ab)
            else:
                raise InvalidArgument(f"unknown sampler variance {variance!r}")
            x = x + np.sqrt(var) * rng.standard_normal(x.shape)
    return x


def sample_params(ckpt: DiffusionCheckpoint, M: int, seed: int, chunk: int = 4096) -> HypothesisSet:
    """``M`` ancestral samples from the EMA denoiser, mapped back to adapter space."""
    if M < 1:
        raise InvalidArgument("need at least one sample")
    denoiser = ckpt.denoiser(use_ema=True)
    schedule = ckpt.schedule
    out = []
    for c, start in enumerate(range(0, M, chunk)):
        rng = np.random.default_rng(derive_seed(seed, "diffusion-sample", c))
        m = min(chunk, M - start)
        x_T = rng.standard_normal((m, ckpt.d))
        out.append(ancestral_sample(denoiser, schedule, x_T, rng, ckpt.config.sampler_variance))
    thetas = ckpt.denormalize(np.concatenate(out))
    return HypothesisSet(thetas, ("diffusion",) * M, "steel",
                         {"checkpoint": ckpt.digest()[:16], "seed": int(seed), "M": int(M)})


# -- checkpoint file -------------------------------------------------------

def _param_layout(params: dict):
    return [[k, list(params[k].shape)] for k in sorted(params)]


def checkpoint_bytes(ckpt: DiffusionCheckpoint) -> bytes:
    ref = ckpt.ema
    layout = _param_layout(ref)
    has_raw = ckpt.params is not None
    meta = {"config": asdict(ckpt.config), "layout": layout, "has_raw": has_raw,
            "metadata": ckpt.metadata}
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    hidden = ckpt.config.denoiser_config(ckpt.d).hidden_dim
    parts = [_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, ckpt.d, hidden, ckpt.config.T, len(meta_bytes)),
             meta_bytes,
             ckpt.schedule.betas[1:].astype("<f8").tobytes(),
             ckpt.mean.astype("<f8").tobytes(),
             ckpt.std.astype("<f8").tobytes()]
    for blob in ([ckpt.params] if has_raw else []) + [ckpt.ema]:
        for k, _ in layout:
            parts.append(np.ascontiguousarray(blob[k], dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: DiffusionCheckpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> DiffusionCheckpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    magic, version, d, hidden, T, meta_len = _HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    try:
        meta = json.loads(blob[pos:pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable metadata") from exc
    pos += meta_len
    cfg = meta["config"]
    config = DiffusionConfig(**cfg)
    if config.T != T or config.denoiser_config(d).hidden_dim != hidden:
        raise CorruptionError(f"{path}: header disagrees with metadata")

    def take(count, dtype):
        nonlocal pos
        size = count * np.dtype(dtype).itemsize
        if pos + size > len(blob):
            raise CorruptionError(f"{path}: truncated payload")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
        pos += size
        return arr

    take(T, "<f8")  # schedule; recomputed from config
    mean = take(d, "<f8").astype(np.float64)
    std = take(d, "<f8").astype(np.float64)
    blobs = []
    for _ in range(2 if meta["has_raw"] else 1):
        params = {}
        for k, shape in meta["layout"]:
            params[k] = take(int(np.prod(shape)), "<f4").astype(np.float64).reshape(shape)
        blobs.append(params)
    if pos != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - pos} trailing bytes")
    raw = blobs[0] if meta["has_raw"] else None
    return DiffusionCheckpoint(config, d, raw, blobs[-1], mean, std, meta["metadata"])


def drop_raw_weights(ckpt: DiffusionCheckpoint) -> DiffusionCheckpoint:
    return replace(ckpt, params=None)
