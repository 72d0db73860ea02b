"""Answer metrics, paired outcomes, oracle-router accuracy and CSV output."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Per-benchmark test sizes used for the weighted average.
PAPER_TEST_SIZES = (5632, 1150, 500, 12032)
METRIC_FIELDS = ("method", "metric", "value", "n", "p_value")


def normalize(tokens) -> list[str]:
    """Lowercase every token and canonicalize whitespace.

    A plain string is split on whitespace; any other iterable is taken as a
    token sequence (ids or strings).
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    out = []
    for t in tokens:
        out += str(t).lower().split()
    return out


def exact_match(pred, gold) -> int:
    return int(normalize(pred) == normalize(gold))


def token_f1(pred, gold) -> float:
    p, g = normalize(pred), normalize(gold)
    overlap = sum((Counter(p) & Counter(g)).values())
    if overlap == 0:
        return 0.0
    precision, recall = overlap / len(p), overlap / len(g)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class PairedOutcomes:
    ids: tuple
    a: tuple[int, ...]
    b: tuple[int, ...]

    def __post_init__(self):
        if not len(self.ids) == len(self.a) == len(self.b):
            raise ValueError("paired outcome vectors differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("question ids must be unique")
        if any(x not in (0, 1) for x in self.a + self.b):
            raise ValueError("outcomes must be 0/1")

    @classmethod
    def join(cls, a: dict, b: dict) -> "PairedOutcomes":
        """Pair two ``{qid: correct}`` maps on their shared ids (sorted)."""
        ids = tuple(sorted(set(a) & set(b)))
        return cls(ids, tuple(int(a[i]) for i in ids), tuple(int(b[i]) for i in ids))

    def discordant(self) -> tuple[int, int]:
        """(b, c): A right and B wrong, A wrong and B right."""
        a, b = np.asarray(self.a), np.asarray(self.b)
        return int(np.sum((a == 1) & (b == 0))), int(np.sum((a == 0) & (b == 1)))

    def accuracy(self) -> tuple[float, float]:
        n = max(len(self.ids), 1)
        return sum(self.a) / n, sum(self.b) / n


def orf_accuracy(outcomes: PairedOutcomes) -> float:
    """Accuracy of an oracle that picks whichever model answered correctly."""
    if not outcomes.ids:
        return 0.0
    return float(np.mean(np.maximum(outcomes.a, outcomes.b)))


def weighted_average(accuracies, weights) -> float:
    acc = np.asarray(accuracies, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if acc.shape != w.shape or acc.ndim != 1 or acc.size == 0:
        raise ValueError("accuracies and weights must be equal-length non-empty vectors")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return float(np.sum(acc * w) / np.sum(w))


def significance_marker(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in METRIC_FIELDS})
