"""Seeded random streams.

All randomness comes from numpy's Philox generator, a 64-bit
counter-based bit generator.  A run seed plus a stream name fully
determines a stream, so adding a consumer never shifts the draws seen by
another one.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` under run ``seed``."""
    tag = zlib.crc32(name.encode("utf-8"))
    key = (int(seed) & _MASK64) | (tag << 64)
    return np.random.Generator(np.random.Philox(key=key))


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
