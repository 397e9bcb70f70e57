"""Seeded xoshiro256** generator with Box-Muller Gaussians."""

from __future__ import annotations

import numpy as np

from ._backend import kernels

_MASK = 0xFFFFFFFFFFFFFFFF


def _splitmix64(x: int):
    while True:
        x = (x + 0x9E3779B97F4A7C15) & _MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        yield z ^ (z >> 31)


class Rng:
    """Deterministic stream keyed by a 64-bit seed.

    The same seed gives the same sequence on every platform with an IEEE-754
    libm, whether or not the compiled kernels are available.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        sm = _splitmix64(self.seed)
        self.state = np.array([next(sm) for _ in range(4)], dtype=np.uint64)

    def spawn(self, key: int | str) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        if isinstance(key, str):
            h = 1469598103934665603
            for ch in key.encode():
                h = ((h ^ ch) * 1099511628211) & _MASK
            key = h
        sm = _splitmix64(self.seed ^ ((int(key) * 0xD1342543DE82EF95) & _MASK))
        return Rng(next(sm))

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        kernels.fill_u64(self.state, out)
        return out

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.empty(n)
        kernels.fill_uniform(self.state, out)
        return (low + (high - low) * out).reshape(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.empty(n)
        if n:
            kernels.fill_normal(self.state, out)
        return (out * std).reshape(shape) if std != 1.0 else out.reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Uniform integers in ``[0, high)``."""
        n = int(np.prod(shape))
        raw = self.u64(n)
        return (raw % np.uint64(high)).astype(np.int64).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.u64(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
