"""Deterministic random streams keyed by ``(seed, stream)``."""

from __future__ import annotations

import numpy as np

from . import tensor as T

_MASK64 = (1 << 64) - 1


class Rng:
    """Counter-based (Philox-4x64) generator.

    The 128-bit Philox key is ``seed | stream << 64`` so distinct streams of the
    same seed never overlap, and the output sequence depends only on
    ``(seed, stream, draw count)``.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = self.seed | (self.stream << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream: int) -> "Rng":
        """Independent generator sharing this seed."""
        return Rng(self.seed, stream)

    def normal(self, shape=(), dtype=None) -> np.ndarray:
        dtype = dtype or T.default_dtype()
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
