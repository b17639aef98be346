"""Counter-based random streams.

Each ``Rng`` wraps a Philox generator keyed by ``(seed, stream_id)``. Distinct
keys select distinct Philox permutations, so two streams never share a
sequence. ``split`` derives child stream ids that are distinct among siblings.
Normals come from Box-Muller on the uniform stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = self.seed | (self.stream_id << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"

    def split(self, k: int) -> list["Rng"]:
        base = splitmix64(self.stream_id)
        return [Rng(self.seed, (base + i + 1) & _MASK64) for i in range(k)]

    def child(self, i: int) -> "Rng":
        """The ``i``-th stream of ``split`` without materialising the others."""
        return Rng(self.seed, (splitmix64(self.stream_id) + i + 1) & _MASK64)

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(shape).astype(dtype, copy=False)

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1], keeps log finite
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self.uniform(shape) < p
