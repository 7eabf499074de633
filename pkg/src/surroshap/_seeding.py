"""Seed derivation and counter-based random streams.

Every random quantity in the package is drawn from a Philox stream keyed by
a tuple of integers (root seed, purpose tag, block index, ...).  Because the
key alone fixes the stream, a block of samples is reproducible no matter which
worker produces it or in what order blocks are processed.
"""

import hashlib
import struct

import numpy as np

__all__ = ["hash64", "stream", "derive_seed"]


def hash64(*parts: int) -> int:
    """Stable 64-bit hash of a sequence of non-negative integers."""
    data = b"".join(struct.pack("<Q", int(p) & 0xFFFFFFFFFFFFFFFF) for p in parts)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def derive_seed(seed: int, *parts: int) -> int:
    return hash64(seed, *parts)


def stream(seed: int, *parts: int) -> np.random.Generator:
    """Counter-based generator for the block identified by ``(seed, *parts)``."""
    key = hash64(seed, *parts)
    return np.random.Generator(np.random.Philox(key=key))


# purpose tags, kept distinct so that streams never collide across subsystems
TAG_SYSTEM = 1
TAG_SCENARIO = 2
TAG_SAMPLER = 3
TAG_STRATIFIED = 4
TAG_DATASET = 5
TAG_SPLIT = 6
TAG_TRAIN = 7
TAG_PERIOD = 8
