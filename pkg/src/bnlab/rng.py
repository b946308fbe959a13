"""Seeded random streams.

A :class:`Prng` wraps numpy's PCG64 bit generator. Child streams are derived
by key-splitting through :class:`numpy.random.SeedSequence` (the child key is
appended to the spawn key), so a child depends only on ``(seed, key path)``
and never on how many values the parent has already produced.

Five named streams are used throughout the package: ``weights``, ``gamma``,
``data_order``, ``augmentation`` and ``mask``.
"""
from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "pcg64/seedsequence-v1"
STREAMS = ("weights", "gamma", "data_order", "augmentation", "mask")


def _key(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


class Prng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path)))
        self.draws = 0

    algorithm = ALGORITHM

    def child(self, name: str | int) -> "Prng":
        return Prng(self.seed, self.path + (_key(name),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size, dtype=np.float64) -> np.ndarray:
        self.draws += int(np.prod(size))
        return self._gen.standard_normal(size, dtype=np.float64).astype(dtype, copy=False)

    def uniform(self, low: float, high: float, size, dtype=np.float64) -> np.ndarray:
        self.draws += int(np.prod(size))
        out = self._gen.uniform(low, high, size).astype(dtype, copy=False)
        # keep the interval half-open after narrowing to float32
        return np.minimum(out, np.nextafter(np.asarray(high, dtype=dtype), np.asarray(low, dtype=dtype)))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        self.draws += 1 if size is None else int(np.prod(size))
        return self._gen.integers(low, high, size)

    def random(self, size=None) -> np.ndarray:
        self.draws += 1 if size is None else int(np.prod(size))
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly without replacement."""
        self.draws += k
        return self._gen.choice(n, size=k, replace=False)

    def __repr__(self) -> str:
        return f"Prng(seed={self.seed}, path={self.path}, draws={self.draws})"
