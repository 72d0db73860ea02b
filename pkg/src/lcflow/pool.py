"""Hierarchical attention pooling of a sharer cache (LCF-X).

Stage one pools every span of the sharer sequence into one key/value pair
with a learned query shared by all spans; stage two pools the span
summaries into a single per-head summary that is broadcast to every
receiver position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

SCHEMES = ("natural", "token_window", "halves", "single")


@dataclass(frozen=True)
class SpanScheme:
    kind: str
    spans: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.spans)

    def validate(self, length: int) -> None:
        if not self.spans:
            raise ContractError("span list is empty")
        covered = np.zeros(length, dtype=bool)
        prev_start = -1
        for a, b in self.spans:
            if not 0 <= a < b <= length:
                raise ContractError(f"span [{a},{b}) invalid for length {length}")
            if a < prev_start:
                raise ContractError("spans out of order")
            prev_start = a
            covered[a:b] = True
        if not covered.all():
            raise ContractError("spans leave sharer tokens uncovered")
        if self.kind != "token_window" and any(b > a2 for (_, b), (a2, _) in zip(self.spans, self.spans[1:])):
            raise ContractError("only token windows may overlap")


def partition_spans(sharer_len: int, kind: str, natural=None, window: int = 0, overlap: int = 0) -> SpanScheme:
    """Split ``sharer_len`` tokens into spans.

    natural: the caller's boundaries; halves: every natural span bisected;
    single: one span; token_window: windows of ``window`` tokens starting every
    ``window - overlap`` tokens, the last one clamped to the sequence end.
    """
    if sharer_len < 1:
        raise ContractError("sharer length must be >= 1")
    if kind == "single":
        spans = [(0, sharer_len)]
    elif kind == "token_window":
        if window < 1 or not 0 <= overlap < window:
            raise ContractError(f"need window >= 1 and 0 <= overlap < window, got {window}, {overlap}")
        stride = window - overlap
        spans, start = [], 0
        while True:
            spans.append((start, min(start + window, sharer_len)))
            if start + window >= sharer_len:
                break
            start += stride
    elif kind in ("natural", "halves"):
        if natural is None:
            raise ContractError(f"{kind} spans need natural boundaries")
        spans = [(int(a), int(b)) for a, b in natural]
        if kind == "halves":
            split = []
            for a, b in spans:
                if b - a < 2:
                    split.append((a, b))
                else:
                    mid = a + (b - a + 1) // 2
                    split += [(a, mid), (mid, b)]
            spans = split
    else:
        raise ContractError(f"unknown span scheme {kind!r}; expected one of {SCHEMES}")
    scheme = SpanScheme(kind, tuple(spans))
    scheme.validate(sharer_len)
    return scheme


def _attention_pool(q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Pool K/V (B, H, N, D) with per-head query q (H, D) under a (P, N) additive mask."""
    H, D = q.shape
    if K.ndim != 4 or K.shape != V.shape or K.shape[1] != H or K.shape[3] != D:
        raise ShapeError(f"pool query {q.shape} incompatible with cache {K.shape} / {V.shape}")
    B, _, N, _ = K.shape
    scores = T.matmul(K, q.reshape(1, H, D, 1)) * (1.0 / np.sqrt(D))     # (B, H, N, 1)
    scores = scores.reshape(B, H, 1, N) + Tensor(mask, dtype=K.data.dtype)
    w = T.softmax_lastdim(scores)                                         # (B, H, P, N)
    return T.matmul(w, K), T.matmul(w, V)


def pool_within_spans(q_base: Tensor, K: Tensor, V: Tensor, spans: SpanScheme) -> tuple[Tensor, Tensor]:
    """Per-span summaries (B, H, P, D); the same query serves every span."""
    N = K.shape[2]
    spans.validate(N)
    mask = np.full((len(spans), N), -np.inf)
    for p, (a, b) in enumerate(spans.spans):
        mask[p, a:b] = 0.0
    return _attention_pool(q_base, K, V, mask)


def pool_across_spans(q_layer: Tensor, K_span: Tensor, V_span: Tensor) -> tuple[Tensor, Tensor]:
    """Collapse P span summaries to (B, H, 1, D)."""
    if K_span.shape[2] < 1:
        raise ContractError("need at least one span summary")
    return _attention_pool(q_layer, K_span, V_span, np.zeros((1, K_span.shape[2])))


@dataclass
class PooledSummary:
    keys: list[Tensor]
    values: list[Tensor]

    def layer(self, i: int) -> tuple[Tensor, Tensor]:
        return self.keys[i], self.values[i]


def pool_cache(adapter, cache, spans: SpanScheme) -> PooledSummary:
    """Pool every sharer layer that some retained receiver layer reads.

    Returns summaries indexed by receiver layer (None where no projector).
    """
    n = adapter.config.layers
    keys: list = [None] * n
    values: list = [None] * n
    for i in adapter.layers:
        q_base, q_layer = adapter.pool_params(i)
        K, V = cache.layer(adapter.config.sharer_layer(i))
        ks, vs = pool_within_spans(q_base, K, V, spans)
        keys[i], values[i] = pool_across_spans(q_layer, ks, vs)
    return PooledSummary(keys, values)
