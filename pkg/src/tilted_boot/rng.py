"""Reproducible random streams keyed by integer tuples.

Every stream is a Philox generator seeded from ``SeedSequence(seed,
spawn_key=key)``, so the stream for ``(seed, rep, method)`` does not depend on
which worker draws it or in what order.
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def substream(rng: np.random.Generator, *key: int) -> np.random.Generator:
    """Derive a child stream from an existing generator without advancing it."""
    ss = rng.bit_generator.seed_seq
    child = np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(child))
