"""Counter-based SplitMix64 generator.

Every draw is ``mix64(key + (counter + 1) * GOLDEN_GAMMA)`` where ``mix64`` is
the SplitMix64 finalizer (Steele, Lea & Flood 2014):

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Because outputs depend only on (key, counter) the integer stream is identical
on every platform and is generated in vectorized numpy.  Doubles use the top
53 bits; normals use Box-Muller on consecutive pairs.
"""

from __future__ import annotations

import zlib

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key_from(seed: int, stream: str) -> int:
    base = int(mix64(np.array([seed & _MASK64], dtype=np.uint64))[0])
    salt = zlib.crc32(stream.encode("utf-8"))
    return int(mix64(np.array([(base ^ (salt * 0x100000001B3)) & _MASK64], dtype=np.uint64))[0])


class Rng:
    """Deterministic generator; ``child`` derives independent named streams."""

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.stream = stream
        self._key = np.uint64(_key_from(self.seed, stream))
        self._counter = 0

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}")

    @property
    def counter(self) -> int:
        return self._counter

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return mix64(self._key + idx * GOLDEN_GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1)."""
        return (self.bits(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        b = self.bits(2 * m)
        u1 = ((b[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
        u2 = (b[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return mean + std * out[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """Integers in [0, high) by multiply-shift on 32 high bits."""
        if high < 1:
            raise ValueError("high must be >= 1")
        hi = (self.bits(n) >> np.uint64(32)).astype(np.uint64)
        return ((hi * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        # 64-bit keys; stable sort settles the (astronomically rare) ties by index
        return np.argsort(self.bits(n), kind="stable").astype(np.int64)

    def choice(self, population: int, k: int) -> np.ndarray:
        """k distinct values from range(population), in random order."""
        if k > population:
            raise ValueError("sample larger than population")
        return self.permutation(population)[:k]

    def unit_vectors(self, n: int, dim: int) -> np.ndarray:
        v = self.normal(n * dim).reshape(n, dim)
        return v / np.linalg.norm(v, axis=1, keepdims=True)
