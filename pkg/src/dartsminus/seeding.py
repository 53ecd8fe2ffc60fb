"""Named random sub-streams derived from one top-level seed.

``stream(seed, "data")`` always yields the same generator for the same pair,
and different names give independent streams. Names in use: ``data``,
``split``, ``init``, ``search``, ``directions``, ``bench``.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = [int(seed), zlib.crc32(name.encode("utf-8")), *map(int, extra)]
    return np.random.default_rng(np.random.SeedSequence(key))


def subseed(seed: int, name: str, *extra: int) -> int:
    return int(stream(seed, name, *extra).integers(0, 2**31 - 1))
