"""Seeded, platform-stable random streams.

Uniforms come from numpy's Philox counter-based bit generator; Gaussians are
produced by Box-Muller from those uniforms so the normal stream does not depend
on numpy's ziggurat tables.
"""

from __future__ import annotations

import numpy as np


class SeededRng:
    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed) & (2**64 - 1)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *keys: int) -> "SeededRng":
        """Independent child stream identified by ``keys`` (stateless w.r.t. this stream)."""
        return SeededRng(self.seed, *self.keys, *keys)

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1]
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, probs, size=None):
        """Inverse-CDF draw of indices with probabilities ``probs``."""
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        cdf[-1] = 1.0
        u = self._gen.random(size)
        return np.searchsorted(cdf, u, side="right")

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
