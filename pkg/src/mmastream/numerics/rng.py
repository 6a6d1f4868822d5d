"""Named, seedable random streams backed by numpy's counter-based Philox generator."""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RandomStreams:
    """Independent generators keyed by name, all derived from one seed.

    ``streams.get("headdrop")`` always returns the same stateful generator for
    that name; ``streams.split("data")`` derives a child family.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = path
        self._gens: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._gens.get(name)
        if gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.path + (_key(name),))
            gen = np.random.Generator(np.random.Philox(ss))
            self._gens[name] = gen
        return gen

    def split(self, name: str) -> "RandomStreams":
        return RandomStreams(self.seed, self.path + (_key(name), 0))

    def __repr__(self) -> str:
        return f"RandomStreams(seed={self.seed}, path={self.path})"


def xavier_uniform(gen: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = (6.0 / (fan_in + fan_out)) ** 0.5
    return gen.uniform(-a, a, size=(fan_in, fan_out)).astype(np.float32)
