"""Deterministic counter-based random number generation.

Every stochastic choice in this package (pixel draws, jitter, label
shuffles, weight init, epoch shuffling) flows through :class:`CounterRng`,
so a single 64-bit seed fully determines every artifact without touching
any platform RNG state. The generator hashes ``(key, counter)`` with a
SplitMix64-style finalizer; bulk output is vectorized over uint64 arrays.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U_GOLDEN = np.uint64(_GOLDEN)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)

_INV_2_53 = 1.0 / float(1 << 53)


def _mix64_int(x: int) -> int:
    """SplitMix64 finalizer on a Python int, masked to 64 bits."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps mod 2^64, which is exactly what we want
    x = (x ^ (x >> _S30)) * _U_MIX1
    x = (x ^ (x >> _S27)) * _U_MIX2
    return x ^ (x >> _S31)


class CounterRng:
    """Seeded counter-based generator with hierarchical sub-streams.

    Output ``i`` of a stream is ``mix64(key + (i+1) * golden)``; distinct
    streams are reached via :meth:`derive`, which hashes an integer tag
    into a child key. Identical (seed, tags, call sequence) therefore give
    identical numbers on every platform.
    """

    def __init__(self, seed: int):
        self._key = _mix64_int(seed)
        self._counter = 0

    def derive(self, tag: int) -> "CounterRng":
        """Child stream independent of this one and of other tags."""
        child = CounterRng.__new__(CounterRng)
        child._key = _mix64_int(self._key ^ _mix64_int((tag + 1) * _GOLDEN))
        child._counter = 0
        return child

    def raw64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs as a uint64 array."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64_array(np.uint64(self._key) + idx * _U_GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1), using the top 53 bits of each output."""
        return (self.raw64(n) >> _S11).astype(np.float64) * _INV_2_53

    def gaussian(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """``n`` normal draws via the Box-Muller transform."""
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1]: keeps log finite
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return mean + std * z[:n]

    def randbelow(self, bound: int) -> int:
        """One integer uniform over [0, bound) (Lemire multiply-shift)."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        x = int(self.raw64(1)[0])
        return (x * bound) >> 64

    def integers(self, bound: int, n: int) -> np.ndarray:
        """``n`` integers uniform over [0, bound)."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        # floor(u * bound) bias is < bound / 2^53: irrelevant for class labels
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of range(n) by sorting 64-bit keys."""
        return np.argsort(self.raw64(n), kind="stable")

    def shuffled(self, values: np.ndarray) -> np.ndarray:
        """Copy of a 1-D array in permuted order."""
        return values[self.permutation(len(values))]
