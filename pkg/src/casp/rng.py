"""Seeded random streams.

Every stream is a Philox counter-based generator keyed by a
``SeedSequence`` built from the user seed plus integer/string tags, so the
same ``(seed, tags)`` produce the same numbers on every platform.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(t) -> int:
    if isinstance(t, str):
        return zlib.crc32(t.encode())
    return int(t)


def make_rng(seed: int, *tags) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), *(_tag(t) for t in tags)])
    return np.random.Generator(np.random.Philox(ss))
