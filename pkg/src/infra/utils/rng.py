"""
DriftLab - Random Stream Splitting.

Every random draw in the lab comes from one 64-bit master seed. A stream is
identified by (purpose label, index): the label is hashed to a 64-bit word and
both words become the SeedSequence spawn key, feeding a counter-based Philox
generator. Streams are therefore independent of scheduling and thread count.

Usage:
    rng = stream(seed, "calibrate", block)
    z = rng.standard_normal((n, c, l))
"""

import hashlib
from functools import lru_cache

import numpy as np


SEED_MASK = (1 << 64) - 1


@lru_cache(maxsize=256)
def label_word(label: str) -> int:
    """64-bit word derived from a purpose label."""
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: int, label: str, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=int(seed) & SEED_MASK,
        spawn_key=(label_word(label), int(index)),
    )


def stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Generator for stream (label, index) under the master seed."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, label, index)))
