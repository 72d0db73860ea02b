"""Adapter training against frozen base models."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_adapter
from .fusion import FusedBatch, fused_ntp_loss, prefill_pair
from .lcf import LCF_SCHEDULE, LCFX_SCHEDULE, GateSchedule, LcfAdapter, gate_temperature_at
from .optim import AdamWState, adamw_step, clip_grad_norm, lr_at_step
from .pool import partition_spans
from .seeding import stream
from .toy_lm import ToyLM

TRACE_FIELDS = ("step", "lr", "temperature", "train_loss", "eval_loss")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    warmup_steps: int | None = None
    max_grad_norm: float = 1.0
    max_steps: int = 300
    batch_size: int = 20
    grad_accum: int = 13
    seed: int = 42
    schedule: GateSchedule = field(default_factory=lambda: LCF_SCHEDULE)
    dropout: float = 0.1
    eval_interval: int = 50
    save_interval: int = 50
    eval_items: int = 256
    span_scheme: str = "natural"
    window: int = 0
    overlap: int = 0
    align: str = "first"

    def __post_init__(self):
        if self.max_steps < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("max_steps, batch_size and grad_accum must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schedule"] = asdict(self.schedule)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = GateSchedule(**d["schedule"])
        return cls(**d)


PRESETS = {
    # settings held constant across LCF runs (effective batch 260)
    "paper_lcf": TrainConfig(),
    # LCF-X: 16 x 16 batch, 200 warmup steps, one epoch of about 277 steps
    "paper_lcfx": TrainConfig(max_steps=277, warmup_steps=200, batch_size=16, grad_accum=16, seed=0,
                              schedule=LCFX_SCHEDULE),
    # desk-scale runs on the synthetic tasks
    "toy_lcfx": TrainConfig(lr=1e-3, max_steps=1000, batch_size=32, grad_accum=1, seed=0,
                            schedule=LCFX_SCHEDULE, eval_interval=100, save_interval=0),
    "toy_lcf": TrainConfig(lr=1e-3, max_steps=500, batch_size=32, grad_accum=1, seed=0,
                           schedule=LCF_SCHEDULE, eval_interval=100, save_interval=0),
}


@dataclass
class TrainResult:
    adapter: object
    trace: list[dict]
    gate_trajectory: dict[int, list[tuple[float, float]]]
    base_hashes: tuple[str, str]


def scheme_for(item, cfg: TrainConfig):
    """Span scheme of one LCF-X item under ``cfg``'s span settings."""
    return partition_spans(len(item.sharer_prompt), cfg.span_scheme, natural=item.spans,
                           window=cfg.window, overlap=cfg.overlap)


def make_batch(items, cfg: TrainConfig, pooled: bool) -> FusedBatch:
    spans = None
    if pooled:
        spans = scheme_for(items[0], cfg)
        if any(scheme_for(it, cfg) != spans for it in items[1:]):
            raise TrainingError("items in one batch must share their span layout")
    return FusedBatch.from_items(items, spans)


def _grads(adapter, tape, loss) -> dict[str, np.ndarray]:
    g = T.reverse_gradients(loss, tape)
    return {k: g[v.id].data if v.id in g else np.zeros_like(v.data) for k, v in adapter.params.items()}


def evaluate_loss(sharer: ToyLM, receiver: ToyLM, adapter, items, cfg: TrainConfig, batch_size: int = 64) -> float:
    """Eval-mode fused loss averaged over ``items`` (weighted by batch size)."""
    pooled = isinstance(adapter, LcfAdapter) and adapter.config.pool
    total, n = 0.0, 0
    with T.no_grad():
        for s in range(0, len(items), batch_size):
            chunk = items[s:s + batch_size]
            loss = fused_ntp_loss(sharer, receiver, adapter, make_batch(chunk, cfg, pooled), "eval", align=cfg.align)
            total += loss.item() * len(chunk)
            n += len(chunk)
    return total / n


def train_adapter(config: TrainConfig, sharer: ToyLM, receiver: ToyLM, adapter, dataset, eval_set=None,
                  out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Train ``adapter`` in place; both base models stay frozen.

    Every step draws ``grad_accum`` micro-batches of ``batch_size`` items,
    averages their gradients, clips to ``max_grad_norm`` and applies AdamW at
    the scheduled learning rate; the gate temperature follows
    ``config.schedule``.
    """
    if not dataset:
        raise TrainingError("training set is empty")
    if config.batch_size > len(dataset):
        raise TrainingError("batch size exceeds the training set")
    if hasattr(adapter.config, "dropout") and adapter.config.dropout != config.dropout:
        adapter.config = dataclasses.replace(adapter.config, dropout=config.dropout)
    if adapter.config.schedule != config.schedule:
        adapter.config = dataclasses.replace(adapter.config, schedule=config.schedule)
    hashes = (sharer.content_hash(), receiver.content_hash())
    sharer.set_trainable(False)
    receiver.set_trainable(False)
    pooled = isinstance(adapter, LcfAdapter) and adapter.config.pool
    eval_items = list(eval_set[:config.eval_items]) if eval_set else []
    batch_rng = stream(config.seed, "batches")
    noise_rng = stream(config.seed, "gate-noise")
    state = AdamWState()
    out = Path(out_dir) if out_dir is not None else None
    trace: list[dict] = []
    gates: dict[int, list[tuple[float, float]]] = {i: [] for i in adapter.layers}

    for step in range(1, config.max_steps + 1):
        tau = gate_temperature_at(step - 1, config.schedule)
        lr = lr_at_step(step, config.max_steps, config.lr, config.warmup_ratio, config.warmup_steps)
        grads: dict[str, np.ndarray] | None = None
        step_loss = 0.0
        for _ in range(config.grad_accum):
            idx = batch_rng.choice(len(dataset), config.batch_size, replace=False)
            batch = make_batch([dataset[i] for i in idx], config, pooled)
            caches = prefill_pair(sharer, receiver, batch, pooled)
            try:
                with T.Tape() as tape:
                    loss = fused_ntp_loss(sharer, receiver, adapter, batch, "train", tau, noise_rng,
                                          config.align, caches=caches)
                    scaled = loss * (1.0 / config.grad_accum)
            except T.NumericError as exc:
                raise TrainingError(f"non-finite values at step {step}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}")
            step_loss += value / config.grad_accum
            g = _grads(adapter, tape, scaled)
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] += g[k]
        clip_grad_norm(grads, config.max_grad_norm)
        adamw_step(adapter.params, grads, state, step, lr, config.weight_decay)
        for i in adapter.layers:
            gates[i].append(adapter.gate_logits(i))
        row = {"step": step, "lr": lr, "temperature": tau, "train_loss": step_loss, "eval_loss": None}
        if eval_items and config.eval_interval and (step % config.eval_interval == 0 or step == config.max_steps):
            row["eval_loss"] = evaluate_loss(sharer, receiver, adapter, eval_items, config)
        trace.append(row)
        if log is not None:
            log(row)
        if out is not None and config.save_interval and step % config.save_interval == 0:
            save_adapter(out / f"adapter_step{step}.lcf", adapter, {"step": step})

    if (sharer.content_hash(), receiver.content_hash()) != hashes:
        raise TrainingError("a frozen base model changed during training")
    if out is not None:
        save_adapter(out / "adapter.lcf", adapter, {"step": config.max_steps})
        write_trace_csv(out / "loss.csv", trace)
    return TrainResult(adapter, trace, gates, hashes)


def write_trace_csv(path: str | Path, trace: list[dict]) -> None:
    def fmt(x):
        return "" if x is None else (str(x) if isinstance(x, int) else f"{x:.8g}")

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in trace:
            w.writerow([fmt(r[k]) for k in TRACE_FIELDS])


def train_base(model: ToyLM, sequences, steps: int, lr: float = 1e-2, seed: int = 0) -> list[float]:
    """Full next-token training of a base model (used for small sanity fixtures)."""
    seqs = np.asarray(sequences, dtype=np.int64)
    model.set_trainable(True)
    state = AdamWState()
    losses = []
    try:
        for step in range(1, steps + 1):
            with T.Tape() as tape:
                logits, _ = model.forward(seqs[:, :-1])
                loss = T.cross_entropy(logits, seqs[:, 1:])
            g = T.reverse_gradients(loss, tape)
            grads = {k: g[v.id].data for k, v in model.params.items() if v.id in g}
            clip_grad_norm(grads, 1.0)
            adamw_step(model.params, grads, state, step, lr, 0.0)
            losses.append(loss.item())
    finally:
        model.set_trainable(False)
    return losses
