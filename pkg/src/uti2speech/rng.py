"""Seeded, splittable random streams.

Every stochastic component draws from its own named stream derived from the
single run seed, so adding or reordering consumers never perturbs the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *scope: str | int) -> np.random.Generator:
    """Return an independent generator for ``(seed, scope...)``.

    String scope parts are folded to stable 32-bit values, so the stream
    depends only on the names, not on call order or interpreter hash state.
    """
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in scope:
        if isinstance(part, str):
            keys.append(zlib.crc32(part.encode("utf-8")))
        else:
            keys.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))
