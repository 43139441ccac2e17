"""
Seeded random streams.
Every stage draws from its own named substream of one root seed, so a stage
can be rerun alone and still see the same numbers.
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name (independent of PYTHONHASHSEED)."""
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Counter-based Philox generator for substream `stream` of root `seed`."""
    seq = np.random.SeedSequence([int(seed), stream_key(stream)])
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, stream: str) -> int:
    """Integer seed for libraries that take one (torch), derived like `make_rng`."""
    seq = np.random.SeedSequence([int(seed), stream_key(stream)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])
