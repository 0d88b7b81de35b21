"""Seed derivation.

Every random draw in a run comes from a generator seeded by hashing the run
seed together with a role tag, so each operation can be replayed in isolation.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    """Return a 64-bit seed derived from ``seed`` and an arbitrary tag path."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(16, "big", signed=True))
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "big")


def make_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))
