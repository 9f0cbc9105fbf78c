"""Deterministic counter-based random streams.

Every stochastic step in this package (entry dropout, synthetic data) draws
from a Philox4x64 stream with an explicit key, so identical inputs produce
bit-identical outputs across runs and platforms.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator backed by Philox4x64 keyed by (seed, stream).

    Distinct (seed, stream) pairs give statistically independent streams;
    the value at position k of a stream depends only on the key and k.
    """
    key = np.array([int(seed) & _MASK64, int(stream) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
