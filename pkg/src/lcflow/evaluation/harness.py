"""Run methods over task items and score them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..fusion import FusedBatch, fused_final_logits, fused_generate
from ..pool import partition_spans
from ..toy_lm import VOCAB, ToyLM, mcq_logit_score
from .metrics import exact_match, token_f1


@dataclass
class MethodResult:
    method: str
    metric: str
    value: float
    n: int
    correct: dict[int, int] = field(default_factory=dict, repr=False)
    predictions: dict[int, list[int]] = field(default_factory=dict, repr=False)
    f1: float | None = None


def strip_answer(tokens: list[int], eos: int = VOCAB.eos) -> list[int]:
    return tokens[:tokens.index(eos)] if eos in tokens else list(tokens)


def _batches(items, size: int):
    for s in range(0, len(items), size):
        yield items[s:s + size]


def _spans(item, scheme: str, window: int, overlap: int):
    return partition_spans(len(item.sharer_prompt), scheme, natural=item.spans, window=window, overlap=overlap)


def lookup_eval(sharer: ToyLM, receiver: ToyLM, adapter, items, method: str = "fused", span_scheme: str = "natural",
                window: int = 0, overlap: int = 0, max_answer: int = 3, batch_size: int = 250,
                align: str = "first") -> MethodResult:
    """Exact match and token F1 of greedy answers.

    ``method`` is ``fused`` (receiver with the adapter), ``receiver``
    (receiver prompt alone) or ``sharer`` (sharer model on its own prompt).
    """
    preds: dict[int, list[int]] = {}
    for chunk in _batches(list(items), batch_size):
        if method == "sharer":
            batch = FusedBatch(np.array([it.sharer_prompt for it in chunk]), np.array([it.sharer_prompt for it in chunk]),
                               np.zeros((len(chunk), 1), dtype=np.int64))
            outs = fused_generate(sharer, sharer, None, batch, max_answer, VOCAB.eos)
        else:
            spans = None
            if adapter is not None and method == "fused" and getattr(adapter.config, "pool", False):
                spans = _spans(chunk[0], span_scheme, window, overlap)
            batch = FusedBatch.from_items(chunk, spans)
            outs = fused_generate(sharer, receiver, adapter if method == "fused" else None, batch, max_answer,
                                  VOCAB.eos, align)
        for it, o in zip(chunk, outs):
            preds[it.qid] = strip_answer(o)
    by_id = {it.qid: it for it in items}
    correct = {q: exact_match(VOCAB.decode(p), VOCAB.decode(by_id[q].gold)) for q, p in preds.items()}
    f1 = float(np.mean([token_f1(VOCAB.decode(p), VOCAB.decode(by_id[q].gold)) for q, p in preds.items()]))
    return MethodResult(method, "em", float(np.mean(list(correct.values()))), len(correct), correct, preds, f1)


def mcq_eval(sharer: ToyLM, receiver: ToyLM, adapter, items, method: str = "fused", batch_size: int = 250,
             align: str = "first") -> MethodResult:
    """Accuracy of logit-scored multiple choice at the final prompt position."""
    correct: dict[int, int] = {}
    with T.no_grad():
        for chunk in _batches(list(items), batch_size):
            if method == "sharer":
                logits = sharer.forward(np.array([it.sharer_prompt for it in chunk]))[0].data[:, -1]
            elif method == "receiver":
                logits = receiver.forward(np.array([it.receiver_prompt for it in chunk]))[0].data[:, -1]
            else:
                logits = fused_final_logits(sharer, receiver, adapter, FusedBatch.from_items(chunk), align)
            for it, row in zip(chunk, logits):
                correct[it.qid] = int(mcq_logit_score(row, it.choices) == it.answer_index)
    return MethodResult(method, "accuracy", float(np.mean(list(correct.values()))), len(correct), correct)


def chance_band(p: float, n: int, sigmas: float = 3.0) -> tuple[float, float]:
    """Binomial mean +/- ``sigmas`` standard errors for ``n`` trials."""
    se = np.sqrt(p * (1 - p) / n)
    return p - sigmas * se, p + sigmas * se
