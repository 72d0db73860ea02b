"""Three-pass structural layer selection for trained adapters.

1. gate audit: a layer whose K and V gate logits are both non-positive is
   dead (its hard gate is 0 at evaluation);
2. harmful removal: a live layer whose single-layer ablation raises accuracy
   is dropped;
3. the remaining layers are ranked by ablation importance and the top K kept.

Pruning never retrains; a pruned adapter simply omits the dropped projectors.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

REPORT_FIELDS = ("layer", "gate_k", "gate_v", "dead", "importance", "harmful", "retained")


@dataclass
class LayerReport:
    layer: int
    gate_k: float
    gate_v: float
    dead: bool
    importance: float | None = None
    harmful: bool = False
    retained: bool = False

    def __post_init__(self):
        if self.dead and self.retained:
            raise ValueError("a dead layer cannot be retained")


def gate_audit(adapter) -> set[int]:
    """Layers whose K and V gate logits are both <= 0."""
    dead = set()
    for i in adapter.layers:
        k, v = adapter.gate_logits(i)
        if k <= 0 and v <= 0:
            dead.add(i)
    return dead


def ablation_importance(adapter, eval_fn: Callable, layer: int, alive=None, base: float | None = None) -> float:
    """accuracy(alive layers) - accuracy(alive layers without ``layer``).

    ``eval_fn`` maps an adapter to an accuracy and must be deterministic.
    """
    alive = set(adapter.layers if alive is None else alive)
    if base is None:
        base = eval_fn(adapter.restrict(alive))
    return float(base - eval_fn(adapter.restrict(alive - {layer})))


def select_layers(reports: list[LayerReport], k: int) -> set[int]:
    """Drop dead and harmful layers, then keep the ``k`` most important.

    Ties in importance go to the lower layer index.
    """
    if k < 0:
        raise ValueError("K must be >= 0")
    survivors = [r for r in reports if not r.dead and not r.harmful]
    survivors.sort(key=lambda r: (-(r.importance or 0.0), r.layer))
    return {r.layer for r in survivors[:k]}


def prune(adapter, eval_fn: Callable, k: int) -> tuple[list[LayerReport], object]:
    """Run all three passes; returns the per-layer reports and the pruned adapter."""
    dead = gate_audit(adapter)
    alive = set(adapter.layers) - dead
    base = eval_fn(adapter.restrict(alive))
    reports = []
    for i in adapter.layers:
        gk, gv = adapter.gate_logits(i)
        r = LayerReport(i, gk, gv, i in dead)
        if i in dead:
            r.importance = 0.0
        else:
            r.importance = ablation_importance(adapter, eval_fn, i, alive, base)
            r.harmful = r.importance < 0
        reports.append(r)
    keep = select_layers(reports, k)
    for r in reports:
        r.retained = r.layer in keep
    return reports, adapter.restrict(keep)


def write_reports_csv(path: str | Path, reports: list[LayerReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            row = asdict(r)
            row["importance"] = "" if r.importance is None else f"{r.importance:.6f}"
            w.writerow(row)
