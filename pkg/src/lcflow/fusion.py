"""End-to-end fusion: sharer prefill, per-layer cache edits, receiver continuation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .align import AlignmentMap, build_alignment
from .lcf import LcfAdapter, lcf_fuse_layer
from .pool import PooledSummary, SpanScheme, pool_cache
from .tensor import ContractError, ShapeError, Tensor
from .toy_lm import KVCache, ToyLM


@dataclass
class FusedBatch:
    """Equal-length prompts for one step.

    ``sharer`` (B, Ls) and ``receiver`` (B, Lr) are full prompts; ``targets``
    (B, Tt) are the tokens the receiver should emit after its prompt.
    """

    sharer: np.ndarray
    receiver: np.ndarray
    targets: np.ndarray
    spans: SpanScheme | None = None

    @classmethod
    def from_items(cls, items, spans: SpanScheme | None = None, with_eos: bool = True, eos: int | None = None):
        from .toy_lm import VOCAB
        eos = VOCAB.eos if eos is None else eos
        sharer = np.array([it.sharer_prompt for it in items], dtype=np.int64)
        receiver = np.array([it.receiver_prompt for it in items], dtype=np.int64)
        targets = np.array([list(it.gold) + ([eos] if with_eos else []) for it in items], dtype=np.int64)
        return cls(sharer, receiver, targets, spans)


def _aligned(t: Tensor, align: AlignmentMap) -> Tensor:
    return T.getitem(t, (slice(None), slice(None), align.indices()))


def _flat(k: Tensor, v: Tensor) -> Tensor:
    B, H, N, D = k.shape
    return T.concat([k.transpose(0, 2, 1, 3).reshape(B, N, H * D),
                     v.transpose(0, 2, 1, 3).reshape(B, N, H * D)], axis=-1)


def fuse_cache(adapter, sharer_cache: KVCache, receiver_cache: KVCache, mode: str = "eval",
               temperature: float = 1.0, rng: np.random.Generator | None = None,
               spans: SpanScheme | None = None, align: str | AlignmentMap = "first",
               noise: bool = True, pooled: PooledSummary | None = None) -> KVCache:
    """Return a new receiver cache with every retained layer's edit applied.

    Layers without a projector pass through untouched (same tensor objects).
    A precomputed ``pooled`` summary skips the pooling step.
    """
    from .c2c import C2CAdapter, c2c_fuse_layer

    keys, values = list(receiver_cache.keys), list(receiver_cache.values)
    if adapter is None:
        return KVCache(keys, values, receiver_cache.last_logits)
    cfg = adapter.config
    if len(keys) != cfg.layers:
        raise ShapeError(f"receiver cache has {len(keys)} layers, adapter expects {cfg.layers}")
    Lr = len(receiver_cache)
    if isinstance(adapter, LcfAdapter) and cfg.pool:
        if pooled is None:
            if spans is None:
                raise ContractError("pooled fusion needs a span scheme")
            pooled = pool_cache(adapter, sharer_cache, spans)
    elif not isinstance(align, AlignmentMap):
        align = build_alignment(len(sharer_cache), Lr, align)
    for i in adapter.layers:
        R_K, R_V = keys[i], values[i]
        if isinstance(adapter, C2CAdapter):
            S_K, S_V = sharer_cache.layer(cfg.sharer_layer(i))
            keys[i], values[i] = c2c_fuse_layer(adapter.layer_params(i), cfg, S_K, S_V, R_K, R_V, align,
                                                mode, temperature, rng, noise)
            continue
        if pooled is not None:
            s = _flat(*pooled.layer(i))
        else:
            S_K, S_V = sharer_cache.layer(cfg.sharer_layer(i))
            s = _flat(_aligned(S_K, align), _aligned(S_V, align))
        keys[i], values[i] = lcf_fuse_layer(adapter.layer_params(i), cfg, s, R_K, R_V, mode, temperature, rng, noise)
    return KVCache(keys, values, receiver_cache.last_logits)


def prefill_pair(sharer: ToyLM, receiver: ToyLM, batch: FusedBatch, pooled: bool) -> tuple[KVCache, KVCache]:
    """Frozen prefills: sharer over its prompt (prefix when aligned), receiver over its prefix."""
    with T.no_grad():
        s_tokens = batch.sharer if pooled else batch.sharer[:, :-1]
        _, s_cache = sharer.forward(s_tokens)
        _, r_cache = receiver.forward(batch.receiver[:, :-1])
    return s_cache, r_cache


def _is_pooled(adapter) -> bool:
    return isinstance(adapter, LcfAdapter) and adapter.config.pool


def fused_logits(sharer: ToyLM, receiver: ToyLM, adapter, batch: FusedBatch, mode: str = "eval",
                 temperature: float = 1.0, rng=None, align="first", noise: bool = True,
                 caches: tuple[KVCache, KVCache] | None = None) -> Tensor:
    """Teacher-forced receiver logits (B, Tt, V) for ``batch.targets``."""
    if batch.targets.shape[1] == 0:
        raise ContractError("target span is empty")
    s_cache, r_cache = caches if caches is not None else prefill_pair(sharer, receiver, batch, _is_pooled(adapter))
    fused = fuse_cache(adapter, s_cache, r_cache, mode, temperature, rng, batch.spans, align, noise)
    feed = np.concatenate([batch.receiver[:, -1:], batch.targets[:, :-1]], axis=1)
    logits, _ = receiver.forward(feed, past=fused)
    return logits


def fused_ntp_loss(sharer: ToyLM, receiver: ToyLM, adapter, batch: FusedBatch, mode: str = "train",
                   temperature: float = 1.0, rng=None, align="first", noise: bool = True,
                   caches: tuple[KVCache, KVCache] | None = None) -> Tensor:
    """Mean next-token cross-entropy of the receiver over the target tokens."""
    logits = fused_logits(sharer, receiver, adapter, batch, mode, temperature, rng, align, noise, caches)
    return T.cross_entropy(logits, batch.targets)


def fused_generate(sharer: ToyLM, receiver: ToyLM, adapter, batch: FusedBatch, max_new: int,
                   stop_id: int | None = None, align="first") -> list[list[int]]:
    """Batched greedy answers from the fused receiver (eval mode, no gradients)."""
    with T.no_grad():
        s_cache, r_cache = prefill_pair(sharer, receiver, batch, _is_pooled(adapter))
        cache = fuse_cache(adapter, s_cache, r_cache, "eval", 1.0, None, batch.spans, align)
        B = batch.receiver.shape[0]
        out: list[list[int]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        nxt = batch.receiver[:, -1:]
        for _ in range(max_new):
            logits, cache = receiver.forward(nxt, past=cache)
            ids = logits.data[:, -1].argmax(-1)
            for b in np.flatnonzero(~done):
                out[b].append(int(ids[b]))
                if ids[b] == stop_id:
                    done[b] = True
            if done.all():
                break
            nxt = ids[:, None]
    return out


def fused_final_logits(sharer: ToyLM, receiver: ToyLM, adapter, batch: FusedBatch, align="first") -> np.ndarray:
    """Eval-mode receiver logits at the final prompt position (B, V)."""
    with T.no_grad():
        s_cache, r_cache = prefill_pair(sharer, receiver, batch, _is_pooled(adapter))
        cache = fuse_cache(adapter, s_cache, r_cache, "eval", 1.0, None, batch.spans, align)
        logits, _ = receiver.forward(batch.receiver[:, -1:], past=cache)
    return logits.data[:, -1]
