"""Deterministic splittable random stream.

The integer stream is SplitMix64 evaluated in counter mode: draw ``k``
(1-based) of a stream with seed ``s`` is ``mix64(s + k * GOLDEN)`` where all
arithmetic is modulo 2**64 and::

    mix64(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

This is bit-identical on every platform.  Derived draws are defined on top of
it:

* ``uniform``: ``(z >> 11) * 2**-53`` mapped affinely to ``[lo, hi)``.
* ``normal``: Box-Muller on consecutive pairs, ``u1 = ((z1 >> 11) + 1) * 2**-53``,
  ``u2 = (z2 >> 11) * 2**-53``, taking the cosine branch only.  Uses libm
  ``log``/``cos``/``sqrt``, so equality across platforms holds to libm accuracy.
* ``below(n)``: ``(z * n) >> 64`` (multiply-shift).
* ``spawn(label)``: child seed ``mix64(seed ^ mix64(fnv1a64(label)))``.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO53 = 2.0**-53


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-mode SplitMix64 stream. Not thread-safe; spawn one per task."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed:#x}, counter={self.counter})"

    def spawn(self, label) -> "Rng":
        key = fnv1a64(str(label).encode("utf-8"))
        return Rng(mix64(self.seed ^ mix64(key)))

    def u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * np.uint64(GOLDEN)
            return _mix_array(z)

    def random(self, size) -> np.ndarray:
        n = int(np.prod(size, dtype=np.int64))
        out = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _TWO53
        return out.reshape(size)

    def uniform(self, lo: float, hi: float, size) -> np.ndarray:
        return lo + (hi - lo) * self.random(size)

    def normal(self, size, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(size, dtype=np.int64))
        z = self.u64(2 * n) >> np.uint64(11)
        u1 = (z[0::2].astype(np.float64) + 1.0) * _TWO53
        u2 = z[1::2].astype(np.float64) * _TWO53
        g = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (mean + std * g).reshape(size)

    def below(self, n: int, size: int | None = None):
        """Uniform integers in ``[0, n)``."""
        count = 1 if size is None else size
        draws = [(int(z) * n) >> 64 for z in self.u64(count)]
        return draws[0] if size is None else draws

    def bits(self, n: int) -> np.ndarray:
        return (self.u64(n) >> np.uint64(63)).astype(np.int64)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
