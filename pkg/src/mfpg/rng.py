"""Named random streams derived from one root seed.

Each purpose (initial states, policy noise, high/low transitions, evaluation,
...) gets its own generator, so drawing more from one stream never shifts the
draws of another.  Children are keyed by a stable hash of the name.
"""
from __future__ import annotations

import zlib

import numpy as np


class Streams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._gens.get(name)
        if gen is None:
            seq = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
            gen = self._gens[name] = np.random.Generator(np.random.PCG64(seq))
        return gen

    def __repr__(self):
        return f"Streams(seed={self.seed}, opened={sorted(self._gens)})"


def as_streams(rng) -> Streams:
    """Accept a ``Streams``, an int seed, or ``None`` (seed 0)."""
    if isinstance(rng, Streams):
        return rng
    return Streams(0 if rng is None else int(rng))
