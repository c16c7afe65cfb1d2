from __future__ import annotations

import numpy as np

from ..errors import NumericError


def grad_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f(x)`` must return ``(value, grad)``. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    value, grad = f(x)
    if not np.isfinite(value):
        raise NumericError(f"f(x) is not finite: {value}")
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)[0]
        flat[i] = orig - h
        fm = f(x)[0]
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        a = grad.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return float(worst)
