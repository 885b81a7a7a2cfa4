"""Seeded random streams.

Every stochastic component draws from its own Philox (counter-based) stream,
keyed by the run seed, a stream name and optional integer indices.  A stream
therefore reproduces independently of how many draws other components made,
and parallel workers can each own a disjoint stream.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Return the generator for ``(seed, name, *index)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name), *map(int, index)))
    return np.random.Generator(np.random.Philox(ss))


def torch_generator(seed: int, name: str, *index: int) -> torch.Generator:
    """A torch generator seeded from the matching numpy stream."""
    g = torch.Generator()
    g.manual_seed(int(stream(seed, name, *index).integers(0, 2**63 - 1)))
    return g
