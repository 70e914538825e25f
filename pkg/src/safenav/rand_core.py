"""Splittable, label-addressed random streams.

A stream is derived from a master seed and a tuple of labels (episode index,
purpose tag, ...) by folding every label into a 64-bit state with the
SplitMix64 finalizer::

    s = mix64(master)
    for label in labels:
        s = mix64(s ^ mix64(key(label) + GOLDEN))

``mix64`` is a bijection on 64-bit integers, so for any fixed prefix the map
from the last integer label to the stream state is injective: distinct episode
indices can never collide. String labels are keyed through an 8-byte BLAKE2b
digest. The derived state seeds a numpy ``PCG64`` bit generator, which produces
the actual variates.

Streams are owned by their consumer; nothing in this module touches global
random state.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

ALGORITHM_ID = "splitmix64-fold/pcg64"


def mix64(z: int) -> int:
    """SplitMix64 output finalizer (a bijection on 64-bit integers)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _label_key(label) -> int:
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("boolean labels are ambiguous; use an int or str")
    if isinstance(label, (int, np.integer)):
        return int(label) & MASK64
    if isinstance(label, str):
        return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")
    raise TypeError(f"unsupported stream label {label!r}")


def derive_state(master_seed: int, *labels) -> int:
    s = mix64(int(master_seed) & MASK64)
    for label in labels:
        s = mix64(s ^ mix64((_label_key(label) + GOLDEN) & MASK64))
    return s


class SeededStream:
    """A reproducible random stream identified by ``(master_seed, labels)``."""

    def __init__(self, master_seed: int, labels: tuple = ()):
        self.master_seed = int(master_seed)
        self.labels = tuple(labels)
        self.state = derive_state(self.master_seed, *self.labels)
        self._gen = np.random.Generator(np.random.PCG64(self.state))

    def __repr__(self):
        return f"SeededStream(seed={self.master_seed}, labels={self.labels!r})"

    def random(self) -> float:
        """One draw from [0, 1)."""
        return float(self._gen.random())

    def uniform(self, lo: float, hi: float) -> float:
        return uniform(self, lo, hi)

    def integers(self, lo: int, hi: int) -> int:
        """Integer in ``[lo, hi]`` (inclusive)."""
        if lo > hi:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        return int(self._gen.integers(lo, hi + 1))

    def choice(self, items):
        items = list(items)
        if not items:
            raise ValueError("cannot choose from an empty sequence")
        return items[self.integers(0, len(items) - 1)]

    def random_array(self, n: int) -> np.ndarray:
        return self._gen.random(n)


def derive(master_seed: int, *labels) -> SeededStream:
    """Stream for ``(master_seed, *labels)``; same inputs give the same sequence."""
    return SeededStream(master_seed, labels)


def uniform(stream: SeededStream, lo: float, hi: float) -> float:
    """Draw from U[lo, hi); ``lo == hi`` returns ``lo`` without consuming a draw."""
    if lo > hi:
        raise ValueError(f"uniform range is inverted: lo={lo} > hi={hi}")
    if lo == hi:
        return float(lo)
    v = lo + (hi - lo) * stream.random()
    # rounding can land exactly on hi for very narrow ranges
    return v if v < hi else float(np.nextafter(hi, lo))
