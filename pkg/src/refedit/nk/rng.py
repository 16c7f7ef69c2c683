"""Deterministic counter-based random streams.

Backed by numpy's Philox-4x64 bit generator: the (seed, stream) pair forms
the 128-bit key, so a parent seed can hand out independent per-item streams
without coordination, and output is identical across platforms.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64)))

    def child(self, stream):
        """Independent stream keyed by ``stream`` under the same seed."""
        # Mix the parent stream in so nested children do not collide.
        mixed = (self.stream * 0x9E3779B97F4A7C15 + int(stream) + 1) & _MASK64
        return Rng(self.seed, mixed)

    def normal(self, shape, dtype=np.float32):
        return self._gen.standard_normal(shape, dtype=np.float64).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, n, size=None, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"
