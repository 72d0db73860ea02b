"""Receiver-to-sharer position maps for shared-context fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("first", "last", "longest")


@dataclass(frozen=True)
class AlignmentMap:
    strategy: str
    mapping: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.mapping)

    def indices(self) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.int64)


def build_alignment(sharer_len: int, receiver_len: int, strategy: str) -> AlignmentMap:
    """Map every receiver position ``r`` to a sharer position ``s(r)``.

    first:   s(r) = min(r, Ls - 1)
    last:    s(r) = clamp(r + Ls - Lr, 0, Ls - 1)   (right-aligned ends)
    longest: s(r) = floor(r * Ls / Lr)              (proportional stretch)
    """
    if sharer_len < 1 or receiver_len < 1:
        raise ValueError("sequence lengths must be >= 1")
    r = np.arange(receiver_len)
    if strategy == "first":
        s = np.minimum(r, sharer_len - 1)
    elif strategy == "last":
        s = np.clip(r + sharer_len - receiver_len, 0, sharer_len - 1)
    elif strategy == "longest":
        s = (r * sharer_len) // receiver_len
    else:
        raise ValueError(f"unknown alignment strategy {strategy!r}; expected one of {STRATEGIES}")
    return AlignmentMap(strategy, tuple(s.tolist()))
