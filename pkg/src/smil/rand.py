"""Named, reproducible random substreams.

Every stochastic component (masking, batching, init, noise draws) pulls from
its own named child stream so that consuming one stream never shifts another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class RandomStream:
    """Single-consumer stream of draws, derived from (seed, path of names)."""

    def __init__(self, seed: int, _path=()):
        self.seed = int(seed)
        self._path = tuple(_path)
        self._gen = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            entropy = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
            for name in self._path:
                entropy.extend(_name_key(name))
            self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        return self._gen

    def child(self, name: str) -> "RandomStream":
        """Independent substream; deterministic function of (seed, names)."""
        return RandomStream(self.seed, self._path + (name,))

    def normal(self, shape):
        return self.generator.standard_normal(shape)

    def uniform(self, low, high, shape):
        return self.generator.uniform(low, high, shape)

    def permutation(self, n):
        return self.generator.permutation(n)

    def integers(self, low, high, shape=None):
        return self.generator.integers(low, high, size=shape)

    def choice(self, n, size, p=None, replace=True):
        return self.generator.choice(n, size=size, p=p, replace=replace)
