"""Deterministic random number generation.

Every stochastic choice in the code base (weight init, shuffling, data
synthesis, augmentation) draws from a :class:`Rng`, whose entire state is a
64-bit seed plus a 64-bit call counter.  Each draw runs on a fresh
counter-keyed Philox stream, so the state serializes to two integers and a
restored generator continues bit-identically on any platform.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """Counter-based generator: (seed, counter) fully determine all output."""

    def __init__(self, seed: int, counter: int = 0):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = seed & _MASK64
        self.counter = counter & _MASK64

    def _next_stream(self) -> np.random.Generator:
        key = np.array([self.seed, self.counter], dtype=np.uint64)
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape, mu: float = 0.0, sigma: float = 1.0, dtype=np.float64) -> np.ndarray:
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        g = self._next_stream()
        return (mu + sigma * g.standard_normal(size=shape)).astype(dtype, copy=False)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        g = self._next_stream()
        return (low + (high - low) * g.random(size=shape)).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._next_stream().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_stream().permutation(n)

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    @classmethod
    def from_state(cls, state: tuple[int, int]) -> "Rng":
        return cls(state[0], state[1])

    def spawn(self) -> "Rng":
        """Derive an independent child generator (costs one draw)."""
        child_seed = int(self._next_stream().integers(0, _MASK64, dtype=np.uint64))
        return Rng(child_seed)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"
