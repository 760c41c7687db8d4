"""Deterministic counter-based random number generation.

Every stochastic component (trace synthesis, random routing, stochastic
verification) draws from CounterRng so that runs are replayable from a seed
alone and bit-identical across platforms.  The generator is a splitmix64
finalizer applied to key + counter * GOLDEN, so any draw can also be read
back positionally with peek() without disturbing the stream.
"""

from __future__ import annotations

MASK64 = 0xFFFF_FFFF_FFFF_FFFF
GOLDEN = 0x9E37_79B9_7F4A_7C15

_FNV64_OFFSET = 0xCBF2_9CE4_8422_2325
_FNV64_PRIME = 0x0000_0100_0000_01B3


def mix64(z: int) -> int:
    """splitmix64 finalizer: a bijective 64-bit avalanche mix."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def _fnv64(data: bytes, basis: int = _FNV64_OFFSET) -> int:
    h = basis & MASK64
    for b in data:
        h = ((h ^ b) * _FNV64_PRIME) & MASK64
    return h


class CounterRng:
    """Counter-based PRNG: value(i) = mix64(key + i * GOLDEN)."""

    def __init__(self, seed: int, key: int = 0):
        self._key = mix64((seed & MASK64) ^ mix64(key))
        self._counter = 0

    def derive(self, label: str) -> "CounterRng":
        """Independent child stream named by `label`; does not advance self."""
        child = CounterRng.__new__(CounterRng)
        child._key = _fnv64(label.encode("utf-8"), basis=self._key ^ _FNV64_OFFSET)
        child._counter = 0
        return child

    def peek(self, index: int) -> int:
        """Positional read of draw `index` (0-based) without advancing."""
        return mix64((self._key + ((index + 1) * GOLDEN)) & MASK64)

    def next_u64(self) -> int:
        self._counter += 1
        return mix64((self._key + (self._counter * GOLDEN)) & MASK64)

    def random(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision (an exact dyadic)."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise ValueError("randrange bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def choice(self, seq):
        return seq[self.randrange(len(seq))]
