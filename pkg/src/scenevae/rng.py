"""Seeded random streams.

Every consumer (weight init, reparameterization noise, data shuffling,
random descriptors) owns a separate stream derived from one 64-bit seed and
a stream name, so draws in one place never shift draws in another.

The bit generator is numpy's PCG64. Normal variates come from the Box-Muller
transform over its uniform doubles, which keeps them reproducible from the
uniform stream alone.
"""

import zlib

import numpy as np

_TWO_PI = 2.0 * np.pi


class Rng:
    def __init__(self, seed: int, stream: str = "default"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        key = zlib.crc32(stream.encode("utf-8"))
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(key,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, stream: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{stream}")

    def uniform(self, size) -> np.ndarray:
        """Doubles in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size, dtype=np.float64) -> np.ndarray:
        size = tuple(np.atleast_1d(size)) if not isinstance(size, tuple) else size
        n = int(np.prod(size, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = _TWO_PI * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(size).astype(dtype, copy=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)
