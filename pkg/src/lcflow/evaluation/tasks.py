"""Synthetic task generators and the line-delimited dataset format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..seeding import stream
from ..toy_lm import LETTERS, MAX_KEYS, MAX_VALUES, VOCAB


@dataclass
class TaskInstance:
    """One evaluation item (token ids throughout).

    ``spans`` are natural ``[start, end)`` boundaries over the sharer prompt
    (``sharer_context + question``). ``choices`` is set for multiple-choice items.
    """

    qid: int
    sharer_context: list[int]
    receiver_context: list[int]
    spans: list[tuple[int, int]]
    question: list[int]
    gold: list[int]
    choices: list[int] | None = None
    answer_index: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def sharer_prompt(self) -> list[int]:
        return self.sharer_context + self.question

    @property
    def receiver_prompt(self) -> list[int]:
        return self.receiver_context + self.question

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["spans"] = [list(s) for s in self.spans]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        rec = dict(rec)
        rec["spans"] = [tuple(s) for s in rec["spans"]]
        return cls(**rec)


def _pairs(keys, values) -> list[int]:
    out = []
    for k, v in zip(keys, values):
        out += [VOCAB.key(k), VOCAB.value(v), VOCAB[";"]]
    return out


def gen_lookup_task(n_items: int, n_pairs: int = 5, n_keys: int = 20, n_values: int = 16,
                    seed: int = 0) -> list[TaskInstance]:
    """Cross-context key/value lookup.

    The sharer sees ``n_pairs`` pairs including the queried key; the receiver
    sees ``n_pairs`` distractor pairs over a disjoint key set. Both get the
    question ``? k =``. One natural span per sharer pair (BOS joins the first,
    the question joins the last).
    """
    if n_keys < 2 * n_pairs:
        raise ValueError("n_keys must be at least 2 * n_pairs")
    if n_keys > MAX_KEYS or n_values > MAX_VALUES:
        raise ValueError("vocabulary too small for the requested key/value counts")
    rng = stream(seed, "data", 1)
    items = []
    for qid in range(n_items):
        keys = rng.permutation(n_keys)[: 2 * n_pairs]
        s_keys, r_keys = keys[:n_pairs], keys[n_pairs:]
        s_vals = rng.integers(0, n_values, n_pairs)
        r_vals = rng.integers(0, n_values, n_pairs)
        target = int(rng.integers(0, n_pairs))
        sharer = [VOCAB.bos] + _pairs(s_keys, s_vals)
        receiver = [VOCAB.bos] + _pairs(r_keys, r_vals)
        question = [VOCAB["?"], VOCAB.key(int(s_keys[target])), VOCAB["="]]
        spans = [(0 if p == 0 else 1 + 3 * p, 1 + 3 * (p + 1)) for p in range(n_pairs)]
        spans[-1] = (spans[-1][0], len(sharer) + len(question))
        items.append(TaskInstance(
            qid=qid, sharer_context=sharer, receiver_context=receiver, spans=spans,
            question=question, gold=[VOCAB.value(int(s_vals[target]))],
            choices=[VOCAB.value(i) for i in range(n_values)], answer_index=int(s_vals[target]),
            meta={"task": "lookup", "target_key": int(s_keys[target])}))
    return items


def gen_full_lookup(n_items: int, n_pairs: int = 5, n_keys: int = 20, n_values: int = 16,
                    seed: int = 0) -> list[TaskInstance]:
    """Single-context lookup (the key is in the model's own context).

    A sanity check for the constructed base model; ``receiver_context`` equals
    ``sharer_context``.
    """
    rng = stream(seed, "data", 2)
    items = []
    for qid in range(n_items):
        keys = rng.permutation(n_keys)[:n_pairs]
        vals = rng.integers(0, n_values, n_pairs)
        target = int(rng.integers(0, n_pairs))
        ctx = [VOCAB.bos] + _pairs(keys, vals)
        question = [VOCAB["?"], VOCAB.key(int(keys[target])), VOCAB["="]]
        items.append(TaskInstance(
            qid=qid, sharer_context=ctx, receiver_context=list(ctx), spans=[(0, len(ctx) + 3)],
            question=question, gold=[VOCAB.value(int(vals[target]))], answer_index=int(vals[target]),
            meta={"task": "full_lookup"}))
    return items


def gen_shared_mcq_task(n_items: int, seed: int = 0, context_len: int = 12) -> list[TaskInstance]:
    """Shared-context four-way multiple choice.

    The context is a digit string with one ``#`` marker; the answer letter is
    ``LETTERS[d % 4]`` for the digit ``d`` following the marker. Only a model
    built with the marker head reads this rule; a receiver without it sits at
    chance.
    """
    rng = stream(seed, "data", 3)
    choices = [VOCAB[c] for c in LETTERS]
    items = []
    for qid in range(n_items):
        digits = rng.integers(0, 10, context_len)
        pos = int(rng.integers(0, context_len - 1))
        ctx = [VOCAB.bos] + [VOCAB[str(d)] for d in digits[:pos]] + [VOCAB["#"]] \
            + [VOCAB[str(d)] for d in digits[pos:]]
        answer = int(digits[pos]) % 4
        question = [VOCAB["?"]]
        items.append(TaskInstance(
            qid=qid, sharer_context=ctx, receiver_context=list(ctx), spans=[(0, len(ctx) + 1)],
            question=question, gold=[choices[answer]], choices=choices, answer_index=answer,
            meta={"task": "mcq"}))
    return items


def save_tasks(path: str | Path, items: list[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for it in items:
            f.write(json.dumps(it.to_record(), sort_keys=True) + "\n")


def load_tasks(path: str | Path) -> list[TaskInstance]:
    with open(path, encoding="utf-8") as f:
        return [TaskInstance.from_record(json.loads(line)) for line in f if line.strip()]
