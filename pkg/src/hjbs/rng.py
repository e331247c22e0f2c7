"""Counter-based random streams.

Every draw in the package comes from one 64-bit seed.  Independent streams are
addressed by integer keys (case, side, time node, ...) through
``SeedSequence(seed, spawn_key=keys)`` feeding a Philox bit generator, so the
stream for a given key does not depend on how many other streams were used or
in which order, which keeps threaded runs reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    if isinstance(part, float):
        return zlib.crc32(repr(part).encode())
    raise TypeError(f"unsupported stream key {part!r}")


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream addressed by ``keys`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_as_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def standard_normal(seed: int, shape, *keys) -> np.ndarray:
    return stream(seed, *keys).standard_normal(shape)
