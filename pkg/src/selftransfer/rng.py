"""Seedable, platform-independent random streams.

The generator is SplitMix64: the state advances by the golden-ratio
increment ``0x9E3779B97F4A7C15`` and each output is the state passed through
the finalizer ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
z *= 0x94D049BB133111EB; z ^= z >> 31``.  Because output ``k`` depends only
on ``seed + k * gamma``, a block of outputs is computed in one vectorized
numpy expression.

Independent streams for different purposes (init, dropout, shuffling, data
synthesis, ...) are derived with :meth:`Rng.spawn`, which hashes the purpose
label with FNV-1a and mixes it into the parent seed.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """Scalar SplitMix64 finalizer on a python int."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fnv1a64(label: str) -> int:
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


class Rng:
    """SplitMix64 stream.

    State is ``(seed, counter)``; ``counter`` is the number of 64-bit words
    consumed so far.  Two streams with equal state produce identical output
    on every platform.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed:#x}, counter={self.counter})"

    @property
    def state(self) -> tuple[int, int]:
        return self.seed, self.counter

    def spawn(self, purpose: str) -> "Rng":
        """Child stream for ``purpose``; does not consume from this stream."""
        return Rng(mix64(self.seed ^ fnv1a64(purpose)))

    def next_u64(self, count: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + 1 + count, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * np.uint64(GAMMA)
            return _mix(z)

    def uniform(self, size) -> np.ndarray:
        """Doubles in [0, 1) with 53 bits of resolution."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        words = self.next_u64(n)
        return ((words >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform_range(self, low: float, high: float, size) -> np.ndarray:
        return low + (high - low) * self.uniform(size)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in [low, high); uses floor of a scaled uniform."""
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals; each pair of uniforms yields a cos/sin pair."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(theta)
        z[:, 1] = radius * np.sin(theta)
        return (std * z.reshape(-1)[:n]).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")
