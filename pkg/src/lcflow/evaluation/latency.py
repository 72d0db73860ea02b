"""Wall-clock time to first token and time to end of answer.

Two protocols are compared on batch-1 items:

* text-to-text with budget ``m``: the sharer decodes exactly ``m`` message
  tokens, the message is placed between the receiver's context and the
  question, then the receiver prefills and answers;
* latent fusion: sharer prefill, span pooling, receiver prefill of its
  prompt prefix, cache fusion, then the receiver answers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..fusion import fuse_cache
from ..pool import partition_spans, pool_cache
from ..toy_lm import VOCAB, KVCache, ToyLM, decode_greedy


@dataclass
class LatencyReport:
    protocol: str
    budget: int | None
    ttft_ms: float
    tteoa_ms: float
    n: int
    ttft_samples: list[float] = field(default_factory=list, repr=False)


def _answer(model: ToyLM, cache: KVCache, first_logits: np.ndarray, max_answer: int, t0: float) -> tuple[float, float]:
    """Emit the first token (TTFT), then decode to EOS or ``max_answer`` (TTEoA)."""
    nxt = int(np.argmax(first_logits))
    ttft = time.perf_counter() - t0
    n = 1
    while nxt != VOCAB.eos and n < max_answer:
        logits, cache = model.forward([nxt], past=cache)
        nxt = int(np.argmax(logits.data[0, -1]))
        n += 1
    return ttft, time.perf_counter() - t0


def _t2t_once(sharer: ToyLM, receiver: ToyLM, item, m: int, max_answer: int) -> tuple[float, float]:
    t0 = time.perf_counter()
    message: list[int] = []
    if m > 0:
        _, s_cache = sharer.prefill_with_cache(item.sharer_prompt)
        message = decode_greedy(sharer, s_cache, m, stop_id=None)
    prompt = item.receiver_context + message + item.question
    logits, cache = receiver.forward(prompt)
    return _answer(receiver, cache, logits.data[0, -1], max_answer, t0)


def _lcfx_once(sharer: ToyLM, receiver: ToyLM, adapter, item, spans_kind: str, max_answer: int) -> tuple[float, float]:
    t0 = time.perf_counter()
    prompt = item.sharer_prompt
    spans = partition_spans(len(prompt), spans_kind, natural=item.spans)
    _, s_cache = sharer.forward(prompt)
    pooled = pool_cache(adapter, s_cache, spans)
    _, r_cache = receiver.forward(item.receiver_prompt[:-1])
    cache = fuse_cache(adapter, s_cache, r_cache, "eval", spans=spans, pooled=pooled)
    logits, cache = receiver.forward(item.receiver_prompt[-1:], past=cache)
    return _answer(receiver, cache, logits.data[0, -1], max_answer, t0)


def measure_ttft_tteoa(protocol: str, items, sharer: ToyLM, receiver: ToyLM, adapter=None, budget: int = 0,
                       spans_kind: str = "natural", max_answer: int = 4, warmup: int = 5) -> LatencyReport:
    """Median TTFT and TTEoA over ``items`` (milliseconds).

    ``protocol`` is ``"t2t"`` (uses ``budget``) or ``"lcfx"`` (uses
    ``adapter``). The first ``warmup`` items are run once and discarded.
    """
    if protocol not in ("t2t", "lcfx"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if protocol == "lcfx" and adapter is None:
        raise ValueError("latent fusion needs an adapter")
    items = list(items)
    if not items:
        raise ValueError("need at least one item")

    def once(it):
        if protocol == "t2t":
            return _t2t_once(sharer, receiver, it, budget, max_answer)
        return _lcfx_once(sharer, receiver, adapter, it, spans_kind, max_answer)

    ttft, tteoa = [], []
    with T.no_grad():
        for it in items[:warmup]:
            once(it)
        for it in items:
            a, b = once(it)
            ttft.append(a * 1e3)
            tteoa.append(b * 1e3)
    return LatencyReport(protocol, budget if protocol == "t2t" else None, float(np.median(ttft)),
                         float(np.median(tteoa)), len(items), ttft)
