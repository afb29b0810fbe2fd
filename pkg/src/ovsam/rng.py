"""Counter-based 64-bit PRNG for reproducible corpus generation.

The generator is fully specified so that corpora are bit-identical across
platforms and languages:

    out(i) = mix64(seed + i * 0x9E3779B97F4A7C15)        (i = 1, 2, ...)

    mix64(z):
        z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
        z ^= z >> 27;  z *= 0x94D049BB133111EB
        z ^= z >> 31
        return z

with all arithmetic modulo 2**64 (splitmix64-style mixing). Derived
streams hash a tag into the seed, so sharded generation matches the
single-threaded result draw for draw.

Floats are built as (out >> 11) * 2**-53, giving uniforms in [0, 1).
Integers use modulo reduction (documented; bias is negligible for the
small ranges used here). Normals use the Box-Muller cosine branch.
"""

from __future__ import annotations

import math
from typing import Sequence, TypeVar

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

T = TypeVar("T")


def mix64(z: int) -> int:
    z &= _MASK
    z ^= z >> 30
    z = (z * _MIX1) & _MASK
    z ^= z >> 27
    z = (z * _MIX2) & _MASK
    z ^= z >> 31
    return z


def _hash_tag(tag) -> int:
    """Map a tag (int or str) to a u64 by folding bytes through mix64."""
    if isinstance(tag, int):
        return mix64(tag & _MASK)
    h = 0x243F6A8885A308D3  # pi fractional bits, arbitrary fixed offset
    for b in str(tag).encode("utf-8"):
        h = mix64(h ^ b)
    return h


class CounterRng:
    """Deterministic counter-based random stream."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self.counter = 0

    def derive(self, *tags) -> "CounterRng":
        """Independent child stream; children with distinct tags never collide."""
        s = self.seed
        for tag in tags:
            s = mix64(s ^ _hash_tag(tag))
        return CounterRng(s)

    def u64(self) -> int:
        self.counter += 1
        return mix64((self.seed + self.counter * _GAMMA) & _MASK)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.u64() % (hi - lo + 1)

    def choice(self, seq: Sequence[T]) -> T:
        if not seq:
            raise ValueError("choice from empty sequence")
        return seq[self.randint(0, len(seq) - 1)]

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates shuffle; also returns the list."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]
        return items

    def permutation(self, n: int) -> list[int]:
        return self.shuffle(list(range(n)))

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        u1 = (self.u64() >> 11) * 2.0**-53
        u2 = (self.u64() >> 11) * 2.0**-53
        # u1 = 0 would take log(0); nudge to the smallest representable draw
        u1 = max(u1, 2.0**-53)
        return mu + sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def array_uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Vectorized uniforms; consumes the same counters as repeated uniform()."""
        n = int(np.prod(shape))
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
            z ^= z >> np.uint64(30)
            z *= np.uint64(_MIX1)
            z ^= z >> np.uint64(27)
            z *= np.uint64(_MIX2)
            z ^= z >> np.uint64(31)
        u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).reshape(shape)
