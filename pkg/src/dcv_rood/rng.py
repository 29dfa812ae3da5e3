"""Portable seeded randomness for every splitting path.

The generator is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter
advanced by the golden-ratio increment, followed by a fixed avalanche mix.
It is tiny, fully specified, and trivially reproduced in any language, which
is the point: identical ``(seed, dataset)`` pairs must give identical folds
everywhere. Reference vectors live in ``tests/test_rng.py``.

Integer draws use rejection sampling, so ``below(n)`` is exactly uniform and
the stream consumption is fully determined by the outputs.
"""

from __future__ import annotations

import hashlib
from typing import MutableSequence, TypeVar

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

T = TypeVar("T")


def mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """SplitMix64 stream.

    >>> g = SplitMix64(1234567)
    >>> g.next_u64()
    6457827717110365317
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        if seed < 0 or seed > MASK64:
            raise ValueError(f"seed must be a u64, got {seed}")
        self.state = seed

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError("n must be positive")
        # largest multiple of n that fits in 2**64
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: MutableSequence[T]) -> MutableSequence[T]:
        """In-place Fisher-Yates shuffle, descending index; returns ``items``."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample(self, items, n: int) -> list:
        """``n`` items without replacement: first ``n`` of a shuffled copy."""
        pool = list(items)
        if n > len(pool):
            raise ValueError("sample larger than population")
        return list(self.shuffle(pool)[:n])

    def uniform(self) -> float:
        """Double in ``[0, 1)`` built from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def hash64(base_seed: int, tag: str, index: int) -> int:
    """Domain-separated seed derivation.

    BLAKE2b with an 8-byte digest over ``"<base_seed>|<tag>|<index>"`` (UTF-8),
    read little-endian. Distinct tags give independent streams, so regimes
    never share randomness.
    """
    msg = f"{int(base_seed)}|{tag}|{int(index)}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(msg, digest_size=8).digest(), "little")
