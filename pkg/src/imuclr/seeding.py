"""Deterministic RNG streams.

Every source of randomness in the package is a `numpy.random.Generator`
built from an explicit key tuple, so identical keys always reproduce the
identical draw sequence. String keys are hashed with CRC32 so call sites
can name their streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def _to_entropy(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return int(key)


def make_rng(*keys: int | str) -> np.random.Generator:
    """Return a PCG64 generator fully determined by the key tuple."""
    if not keys:
        raise ValueError("make_rng requires at least one key")
    entropy = [_to_entropy(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def spawn_seed(*keys: int | str) -> int:
    """Derive a child seed (for trial/worker streams) from a key tuple."""
    return int(make_rng(*keys).integers(0, 2**63 - 1))
