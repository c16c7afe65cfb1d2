"""Deterministic seed derivation.

Every random stream in a run is derived from one master seed plus a tuple of
namespace keys, so adding a new consumer never shifts an existing stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *keys) -> int:
    text = repr((int(master),) + tuple(str(k) for k in keys)).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def rng_for(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
