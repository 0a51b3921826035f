"""Deterministic random number generation.

xoshiro256++ with splitmix64 seeding: a stated, portable generator so that a
seed produces the same stream on every platform. All stochastic draws in the
package go through this module (never through `random`), which also keeps
results independent of the active kernel backend.
"""

import math
from array import array

_MASK = (1 << 64) - 1
_INV_2_53 = 2.0 ** -53
_GUMBEL_EPS = 1e-12


def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256++ stream. Identical seed => identical stream."""

    __slots__ = ("seed", "_s0", "_s1", "_s2", "_s3", "_spare_normal")

    def __init__(self, seed):
        self.seed = int(seed) & _MASK
        state = self.seed
        state, self._s0 = _splitmix64(state)
        state, self._s1 = _splitmix64(state)
        state, self._s2 = _splitmix64(state)
        state, self._s3 = _splitmix64(state)
        self._spare_normal = None

    def derive(self, tag):
        """Independent child stream keyed by (seed, tag), order-insensitive."""
        _, mixed = _splitmix64(self.seed ^ _fnv1a64(tag))
        return Rng(mixed)

    def next_u64(self):
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        result = (_rotl((s0 + s3) & _MASK, 23) + s0) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def random(self):
        """Uniform float64 in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform(self, lo, hi):
        return lo + (hi - lo) * self.random()

    def gumbel(self):
        """Standard Gumbel(0, 1) via -log(-log(u)), u clamped away from {0, 1}."""
        u = self.random()
        if u < _GUMBEL_EPS:
            u = _GUMBEL_EPS
        elif u > 1.0 - _GUMBEL_EPS:
            u = 1.0 - _GUMBEL_EPS
        return -math.log(-math.log(u))

    def normal(self):
        """Standard normal via Box-Muller (pairs cached)."""
        spare = self._spare_normal
        if spare is not None:
            self._spare_normal = None
            return spare
        u1 = self.random()
        while u1 <= 0.0:
            u1 = self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, n, std=1.0):
        out = array("d", bytes(8 * n))
        for i in range(n):
            out[i] = std * self.normal()
        return out

    def gumbels(self, n):
        out = array("d", bytes(8 * n))
        for i in range(n):
            out[i] = self.gumbel()
        return out

    def randbelow(self, n):
        """Uniform integer in [0, n) without modulo bias (rejection)."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        threshold = ((1 << 64) // n) * n
        r = self.next_u64()
        while r >= threshold:
            r = self.next_u64()
        return r % n

    def shuffle(self, items):
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, n, k):
        """k distinct indices from range(n), order random."""
        if k > n:
            raise ValueError(f"cannot sample {k} distinct indices from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
