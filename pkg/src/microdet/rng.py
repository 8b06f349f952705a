"""SplitMix64: a counter-based 64-bit generator.

The k-th output of a stream seeded with ``s`` is ``mix(s + k * GAMMA)``, so
whole blocks can be drawn with vectorised uint64 arithmetic and the stream
is bit-identical on every platform.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix_scalar(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *path: int) -> int:
    """Sub-seed for item ``path`` of a stream: the path[0]-th SplitMix64 output, recursively."""
    s = seed & _MASK
    for idx in path:
        s = _mix_scalar((s + (int(idx) + 1) * GAMMA) & _MASK)
    return s


class Rng:
    """Deterministic random source.

    Only ``state`` (a Python int) is kept, so an ``Rng`` can be checkpointed
    by recording one number.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def spawn(self, *path: int) -> "Rng":
        return Rng(derive_seed(self.state, *path))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & _MASK
        return _mix_scalar(self.state)

    def u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            ks = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + ks * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + n * GAMMA) & _MASK
        return out

    def random(self, size=None):
        """Uniform floats in [0, 1) with 53 random bits."""
        if size is None:
            return (self.next_u64() >> 11) * (1.0 / (1 << 53))
        n = int(np.prod(size))
        return ((self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))).reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError("integers: empty range")
        if size is None:
            return low + int(self.random() * span)
        return low + np.floor(self.random(size) * span).astype(np.int64)

    def normal(self, mean=0.0, std=1.0, size=None):
        """Box-Muller normals."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.random((2, m))
        u1 = 1.0 - u[0]  # (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = mean + std * z
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort of random keys is a permutation independent of sort impl
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]
