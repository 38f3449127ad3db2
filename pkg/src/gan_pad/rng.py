"""Seeded random streams.

Every stream is a numpy ``PCG64`` generator seeded through ``SeedSequence``
with a spawn key, so ``split`` derives independent, reproducible substreams
(per sample, per subsystem) without consuming draws from the parent.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

SUBSYSTEMS = ("data", "init", "training", "sampling", "probe")


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & 0xFFFFFFFF


class RngStream:
    """A seeded random stream with a deterministic ``split``."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_key(k) for k in path)
        seq = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def split(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(_key(k) for k in keys))

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def torch_generator(self) -> torch.Generator:
        """A torch generator seeded from this stream's next draw."""
        g = torch.Generator()
        g.manual_seed(int(self.generator.integers(0, 2**63 - 1)))
        return g


def subsystem_seed(root_seed: int, name: str) -> int:
    """Derive the seed of one subsystem (data, init, training, sampling) from the root seed."""
    stream = RngStream(root_seed, (name,))
    return int(stream.integers(0, 2**63 - 1))
