"""Seeded randomness on a fixed counter-based generator.

All randomness in the package flows through Rng, which pins numpy's Philox
(4x64) bit generator. Philox is counter-based, so identical (seed, stream)
plus an identical call sequence reproduces the same outputs on every
platform. Independent streams are derived by keying Philox with
(seed, stream) directly rather than by jumping.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64"


class Rng:
    """Deterministic random source: fixed algorithm, explicit seed and stream."""

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    # odd multiplier mixes the parent stream into the child key so that
    # splits of distinct parents never collide; a stream-0 parent keeps
    # split(s) == Rng(seed, s)
    _SPLIT_MIX = 0x9E3779B97F4A7C15

    def split(self, stream: int) -> "Rng":
        """Independent child stream keyed by (parent stream, stream)."""
        child = (self.stream * self._SPLIT_MIX + stream) % 2**64
        return Rng(self.seed, child)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.uniform(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def sample_without_replacement(self, population: int, count: int) -> np.ndarray:
        """Uniform k-subset of range(population), returned sorted ascending.

        Every k-subset is equally likely (prefix of a uniform permutation).
        """
        if count < 0 or count > population:
            raise ValueError(
                f"cannot sample {count} distinct indices from {population}"
            )
        picked = self._gen.permutation(population)[:count]
        picked.sort()
        return picked
