"""Adam and LAMB as pure functions over ``{name: array}`` parameter dicts."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import InvalidArgument, NumericError

MAX_TRUST_RATIO = 10.0


@dataclass(frozen=True)
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("adam", "lamb"):
            raise InvalidArgument(f"unknown optimizer {self.algorithm!r}")


def _as_dict(x):
    return x if isinstance(x, dict) else {"": x}


def _unwrap(d, like):
    return d if isinstance(like, dict) else d[""]


def optimizer_step(state: OptimizerState, params, grads, lr: float | None = None):
    """One update. Returns ``(new_params, new_state)``; inputs are not modified.

    ``params``/``grads`` are either arrays or dicts of arrays; for LAMB each
    dict entry is one layer for the trust-ratio computation. ``lr`` overrides
    ``state.lr`` (for schedules).
    """
    p, g = _as_dict(params), _as_dict(grads)
    if p.keys() != g.keys():
        raise InvalidArgument("params and grads have different keys")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, w in p.items():
        grad = np.asarray(g[name], dtype=np.float64)
        if grad.shape != w.shape:
            raise InvalidArgument(f"{name or 'params'}: grad shape {grad.shape} != {w.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"{name or 'params'}: non-finite gradient")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * grad if m is None else b1 * m + (1 - b1) * grad
        v = (1 - b2) * grad**2 if v is None else b2 * v + (1 - b2) * grad**2
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * w
        if state.algorithm == "lamb":
            w_norm = float(np.linalg.norm(w))
            u_norm = float(np.linalg.norm(update))
            ratio = 1.0 if w_norm == 0.0 or u_norm == 0.0 else w_norm / u_norm
            update = update * min(max(ratio, 0.0), MAX_TRUST_RATIO)
        new_p[name] = w - lr * update
        new_m[name] = m
        new_v[name] = v
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return _unwrap(new_p, params), new_state


def onecycle_lr(step: int, total_steps: int, lr_start: float, lr_max: float,
                warmup_steps: int = 1000, final_div: float = 1e4) -> float:
    """Cosine warmup ``lr_start -> lr_max`` then cosine anneal to ``lr_start/final_div``."""
    if lr_start > lr_max:
        raise InvalidArgument("lr_start must not exceed lr_max")
    if step > total_steps:
        warnings.warn(f"step {step} past total_steps {total_steps}; clamping", stacklevel=2)
        step = total_steps
    step = max(step, 0)
    warmup = min(warmup_steps, total_steps)
    lr_end = lr_start / final_div
    if step <= warmup and warmup > 0:
        frac = step / warmup
        return lr_max + (lr_start - lr_max) * (1 + math.cos(math.pi * frac)) / 2
    span = total_steps - warmup
    frac = 1.0 if span == 0 else (step - warmup) / span
    return lr_end + (lr_max - lr_end) * (1 + math.cos(math.pi * frac)) / 2
