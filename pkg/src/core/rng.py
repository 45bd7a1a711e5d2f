"""Seedable counter-based random streams.

Each run owns one master seed. Named streams ("window", "mix", "data",
"init", ...) are derived from it so that changing how one source of
randomness is consumed never shifts the draws of another.
"""

import zlib
from typing import Optional, Sequence, Tuple, Union

import numpy as np


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Philox-backed generator with named, independent child streams."""

    def __init__(self, seed: int, path: Sequence[int] = ()):
        """
        Initialize the generator.

        Args:
            seed: Master 64-bit seed
            path: Derivation path of named streams below the master seed
        """
        if seed < 0:
            raise ValueError(f"Seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path: Tuple[int, ...] = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def stream(self, name: str, index: Optional[int] = None) -> "Rng":
        """
        Derive an independent stream.

        Args:
            name: Stream name, e.g. "window"
            index: Optional integer sub-key (per-sample seeds, per-epoch, ...)

        Returns:
            New Rng whose draws do not depend on this one's consumption
        """
        path = self.path + (_stream_key(name),)
        if index is not None:
            path = path + (int(index),)
        return Rng(self.seed, path)

    # Draws

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        """Uniform reals on [low, high)."""
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers on [low, high)."""
        return self._gen.integers(low, high, size)

    def beta(self, alpha: float, size=None):
        """Symmetric Beta(alpha, alpha) draws."""
        if alpha <= 0:
            raise ValueError(f"Beta concentration must be positive, got {alpha}")
        return self._gen.beta(alpha, alpha, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        """Normal draws; standard normal by default."""
        return self._gen.normal(loc, scale, size)

    def bernoulli(self, p: float, size) -> np.ndarray:
        """Boolean array, each entry True with probability p."""
        return self._gen.random(size) < p

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        """k indices from range(n), without replacement by default."""
        return self._gen.choice(n, size=k, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def as_rng(value: Union[int, Rng]) -> Rng:
    """Accept either a seed or an existing Rng."""
    return value if isinstance(value, Rng) else Rng(int(value))
