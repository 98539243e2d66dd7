"""Deterministic 64-bit PRNG used for data generation, init, and shuffling.

The generator is splitmix64, implemented here rather than taken from a
library so that the exact stream is pinned by this code alone.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """Advance one splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    """Stateful wrapper with the handful of distributions the harness needs."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state, value = splitmix64(self._state)
        return value

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # 53-bit mantissa, [0, 1)
        u = self.next_u64() >> 11
        return lo + (hi - lo) * (u * (1.0 / (1 << 53)))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive (modulo reduction)."""
        if hi < lo:
            raise ValueError(f"randint: empty range [{lo}, {hi}]")
        span = hi - lo + 1
        return lo + self.next_u64() % span

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        # Box-Muller; the second variate is discarded to keep the stream
        # a pure function of the call count.
        u1 = self.uniform()
        u2 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        return mu + sigma * r * math.cos(2.0 * math.pi * u2)

    def trunc_normal(self, sigma: float, bound: float = 2.0) -> float:
        """Normal(0, sigma) resampled until within +/- bound*sigma."""
        while True:
            v = self.normal(0.0, sigma)
            if abs(v) <= bound * sigma:
                return v

    def choice(self, seq):
        return seq[self.randint(0, len(seq) - 1)]

    def shuffle(self, items: list) -> None:
        # Fisher-Yates
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def spawn(self, tag: int) -> "SplitMix64":
        """Derived generator with a stream decorrelated from this one."""
        return SplitMix64(self.next_u64() ^ (tag & MASK64))

    # Vectorized draws. splitmix64's state advance is state += golden, so the
    # next n outputs are a closed form of the current state; these methods
    # consume exactly the same stream positions as n sequential next_u64 calls.

    def u64_array(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + idx * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GOLDEN) & MASK64
        return z

    def normal_array(self, n: int) -> np.ndarray:
        """n standard-normal f64 draws (Box-Muller, cosine branch)."""
        u1 = (self.u64_array(n) >> np.uint64(11)).astype(np.float64)
        u2 = (self.u64_array(n) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * (1.0 / (1 << 53))  # (0, 1]: log stays finite
        u2 = u2 * (1.0 / (1 << 53))
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def trunc_normal_array(self, n: int, sigma: float, bound: float = 2.0) -> np.ndarray:
        out = self.normal_array(n) * sigma
        bad = np.abs(out) > bound * sigma
        while bad.any():
            out[bad] = self.normal_array(int(bad.sum())) * sigma
            bad = np.abs(out) > bound * sigma
        return out
