"""Deterministic, splittable random streams.

Every random artifact in the package is drawn from a substream derived
from a single 64-bit seed plus a path of labels, backed by the Philox
counter-based generator. The same (seed, path) always yields the same
stream, and distinct paths yield statistically independent streams, so
each subcomponent (datasets, inits, shifts, ...) is reproducible on its
own.
"""

from __future__ import annotations

import zlib

import numpy as np


def _path_key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for `seed` at the given label path."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(_path_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
