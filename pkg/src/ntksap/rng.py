"""Seeded random streams.

Every random draw in the package comes from ``make_rng(seed, *stream)``: a
PCG64 generator keyed by a ``SeedSequence`` over the run seed plus integer
stream tags (round index, batch index, ...).  Streams with distinct tags are
statistically independent, and the same tags always reproduce the same draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    tags = [int(seed)] + [tag_id(s) if isinstance(s, str) else int(s) for s in stream]
    if any(t < 0 for t in tags):
        raise ValueError(f"seed and stream tags must be non-negative, got {tags}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(tags)))


def tag_id(name: str) -> int:
    """Stable integer tag for a string (CRC32, platform independent)."""
    return zlib.crc32(name.encode("utf-8"))
