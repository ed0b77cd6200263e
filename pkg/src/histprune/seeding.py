"""Named, independent random streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "agent-noise", "replay", "assistant", "shuffle", "env")


class SeedStreams:
    """``generator(name)`` returns a fresh generator that depends only on (seed, name).

    Adding or consuming one stream never shifts another, so components can be
    switched on or off without perturbing the rest of a run.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)

    def sequence(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))

    def generator(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.sequence(name))
