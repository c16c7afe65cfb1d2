from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument


def sinusoidal_embed(t, dim: int, max_period: float = 10000.0):
    """Interleaved ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]``.

    Frequencies are geometric from 1 down to ``1/max_period``. ``t`` may be a
    scalar or a 1-D array; an array gives one row per timestep.
    """
    if dim <= 0 or dim % 2:
        raise InvalidArgument(f"embedding dim must be a positive even number, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise InvalidArgument("timesteps must be nonnegative")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = max_period ** (-np.arange(half) / (half - 1))
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out
