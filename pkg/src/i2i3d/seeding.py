"""Per-purpose seed splitting.

``split_seed(seed, purpose, index)`` feeds (seed, crc32(purpose), index) into
a numpy ``SeedSequence`` and takes its first 63-bit state word, so every
consumer of randomness draws from an independent, reproducible stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def split_seed(seed: int, purpose: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode()), int(index)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def rng_for(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(split_seed(seed, purpose, index))
