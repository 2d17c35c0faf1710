"""Seedable named RNG streams.

Each consumer (data generation, dropout, init, ...) gets its own generator,
derived deterministically from the run seed and a stream name. Streams are
independent of each other and of the order in which they are created.
"""

import hashlib

import numpy as np


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for stream `name`, reproducible from (seed, name) alone."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in (0, 4, 8, 12)]
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + words)
    return np.random.Generator(np.random.PCG64(ss))
