"""Named, seedable random streams.

``stream(seed, "train", 16, "dropout")`` always returns the same generator,
independent of any other path under the same seed, so adding draws to one
stream never shifts another.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def stream(seed: int, *path) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(seq))
