"""Deterministic random streams.

Seeds are mixed with splitmix64 so that child streams can be derived from a
run seed plus arbitrary integer keys (frame index, epoch, sample id). The
bulk generator is NumPy's PCG64, whose bit stream is fixed across platforms.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Mix ``seed`` with ``keys`` into a new 64-bit seed."""
    h = splitmix64(seed & _MASK)
    for k in keys:
        h = splitmix64(h ^ (int(k) & _MASK))
    return h


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._gen = np.random.Generator(np.random.PCG64(splitmix64(self.seed)))

    def child(self, *keys: int) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))

    def next_u64(self) -> int:
        return int(self._gen.integers(0, 1 << 64, dtype=np.uint64, endpoint=False))

    def uniform(self, low=0.0, high=1.0, size=None, dtype=np.float64):
        out = self._gen.uniform(low, high, size)
        return out.astype(dtype) if size is not None else float(out)

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=np.float64):
        out = self._gen.normal(loc, scale, size)
        return out.astype(dtype) if size is not None else float(out)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size=None, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, size, dtype=np.float32) -> np.ndarray:
        """0/1 array with P(1) = p."""
        return (self._gen.random(size) < p).astype(dtype)

    def dropout_mask(self, p: float, size, dtype=np.float32) -> np.ndarray:
        """Inverted-dropout mask: 0 with probability p, else 1/(1-p)."""
        keep = self.bernoulli(1.0 - p, size, dtype)
        return keep / dtype(1.0 - p) if p > 0 else keep
