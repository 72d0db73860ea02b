"""Reproducible random streams.

All randomness goes through Philox (a counter-based generator) keyed by a
64-bit seed plus a purpose tag, so the init, Gumbel-noise, dropout and data
streams never share state.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, *extra)``."""
    tag = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag, *[int(e) for e in extra]])
    return np.random.Generator(np.random.Philox(ss))
