"""Command-line entry point.

Subcommands: gen-data, train, eval, prune, count-params, bench-latency.
Run configs are JSON objects; command-line flags override their keys, and
every run writes the resolved config next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 malformed config or arguments,
3 missing checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import accounting
from .c2c import C2CAdapter, C2CConfig
from .checkpoint import CheckpointError, load_adapter, load_model, save_adapter
from .evaluation.harness import lookup_eval, mcq_eval
from .evaluation.latency import measure_ttft_tteoa
from .evaluation.metrics import PairedOutcomes, write_metrics_csv
from .evaluation.stats import mcnemar_exact_p
from .evaluation.tasks import gen_lookup_task, gen_shared_mcq_task, load_tasks, save_tasks
from .lcf import LcfAdapter, LcfConfig
from .pruning import prune, write_reports_csv
from .trainer import PRESETS, TrainConfig, train_adapter
from .toy_lm import build_lookup_model

EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3


class ConfigError(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    task: str = "lookup"
    adapter: str = "lcfx"
    d: int = 64
    preset: str = "toy_lcfx"
    seed: int = 0
    base_seed: int = 0
    data_seed: int = 1
    eval_seed: int = 2
    n_train: int = 4000
    n_eval: int = 500
    span_scheme: str = "natural"
    window: int = 4
    overlap: int = 0
    align: str = "first"
    gate_init: float | None = None
    sharer_checkpoint: str | None = None
    receiver_checkpoint: str | None = None
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("lookup", "mcq"):
            raise ConfigError(f"task: expected lookup or mcq, got {self.task!r}")
        if self.adapter not in ("lcf", "lcfx", "c2c"):
            raise ConfigError(f"adapter: expected lcf, lcfx or c2c, got {self.adapter!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {self.preset!r}")
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        for key in self.train:
            if key not in known:
                raise ConfigError(f"train.{key}: unknown key")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"{key}: unknown key")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        base = PRESETS[self.preset].to_dict()
        base.update(self.train)
        base.update(seed=self.seed, span_scheme=self.span_scheme, window=self.window, overlap=self.overlap,
                    align=self.align)
        try:
            return TrainConfig.from_dict(base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def persist(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    resolved = asdict(cfg)
    resolved["train"] = cfg.train_config().to_dict()
    (out / f"{command}.config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    with open(out / "run.log", "a", encoding="utf-8") as f:
        f.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {command}\n")


# ------------------------------------------------------------- builders


def base_models(cfg: RunConfig):
    sharer = build_lookup_model(cfg.base_seed, mcq_head=cfg.task == "mcq")
    receiver = sharer if cfg.task == "lookup" else build_lookup_model(cfg.base_seed)
    if cfg.sharer_checkpoint:
        sharer = load_model(require(cfg.sharer_checkpoint))
    if cfg.receiver_checkpoint:
        receiver = load_model(require(cfg.receiver_checkpoint))
    return sharer, receiver


def datasets(cfg: RunConfig):
    if cfg.task == "lookup":
        return gen_lookup_task(cfg.n_train, seed=cfg.data_seed), gen_lookup_task(cfg.n_eval, seed=cfg.eval_seed)
    return gen_shared_mcq_task(cfg.n_train, seed=cfg.data_seed), gen_shared_mcq_task(cfg.n_eval, seed=cfg.eval_seed)


def new_adapter(cfg: RunConfig, sharer, receiver):
    tc = cfg.train_config()
    if cfg.adapter == "c2c":
        gate = 0.0 if cfg.gate_init is None else cfg.gate_init
        c = C2CConfig.for_models(sharer.geometry, receiver.geometry, gate_init=gate, schedule=tc.schedule)
        return C2CAdapter.init(c, cfg.seed)
    pool = cfg.adapter == "lcfx"
    gate = (1.0 if pool else 0.0) if cfg.gate_init is None else cfg.gate_init
    c = LcfConfig.for_models(sharer.geometry, receiver.geometry, cfg.d, pool=pool, gate_init=gate,
                             dropout=tc.dropout, schedule=tc.schedule)
    return LcfAdapter.init(c, cfg.seed)


def require(path: str) -> str:
    if not Path(path).is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    return path


def evaluate(cfg: RunConfig, sharer, receiver, adapter, items, method: str = "fused"):
    if cfg.task == "lookup":
        return lookup_eval(sharer, receiver, adapter, items, method, cfg.span_scheme, cfg.window, cfg.overlap,
                           align=cfg.align)
    return mcq_eval(sharer, receiver, adapter, items, method, align=cfg.align)


# ------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    persist(out, cfg, "gen-data")
    train, test = datasets(cfg)
    save_tasks(out / "train.jsonl", train)
    save_tasks(out / "eval.jsonl", test)
    print(f"wrote {len(train)} train and {len(test)} eval items to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    persist(out, cfg, "train")
    sharer, receiver = base_models(cfg)
    train, test = datasets(cfg)
    adapter = new_adapter(cfg, sharer, receiver)
    result = train_adapter(cfg.train_config(), sharer, receiver, adapter, train, test, out)
    last = result.trace[-1]
    print(f"trained {len(result.trace)} steps; final train loss {last['train_loss']:.4f}; "
          f"eval loss {last['eval_loss']}")
    return 0


def _eval_adapter(args):
    if args.adapter in (None, "none"):
        return None
    adapter = load_adapter(require(args.adapter))
    if args.gates == "closed":
        adapter = adapter.close_gates()
    return adapter


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    persist(out, cfg, "eval")
    sharer, receiver = base_models(cfg)
    _, items = datasets(cfg)
    if args.data:
        items = load_tasks(args.data)
    adapter = _eval_adapter(args)
    fused = evaluate(cfg, sharer, receiver, adapter, items, "fused" if adapter is not None else "receiver")
    base = evaluate(cfg, sharer, receiver, None, items, "receiver")
    p = mcnemar_exact_p(PairedOutcomes.join(fused.correct, base.correct))
    name = "receiver" if adapter is None else f"{cfg.adapter}"
    rows = [{"method": name, "metric": fused.metric, "value": f"{fused.value:.6f}", "n": fused.n,
             "p_value": f"{p:.6g}"}]
    if fused.f1 is not None:
        rows.append({"method": name, "metric": "f1", "value": f"{fused.f1:.6f}", "n": fused.n, "p_value": ""})
    rows.append({"method": "receiver", "metric": base.metric, "value": f"{base.value:.6f}", "n": base.n,
                 "p_value": ""})
    write_metrics_csv(out / "metrics.csv", rows)
    print(f"{name} {fused.metric} {fused.value:.4f} (receiver-only {base.value:.4f}, p={p:.3g})")
    return 0


def cmd_prune(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    persist(out, cfg, "prune")
    sharer, receiver = base_models(cfg)
    adapter = load_adapter(require(args.adapter))
    if not isinstance(adapter, LcfAdapter):
        raise ConfigError("adapter: pruning needs an LCF checkpoint")
    _, items = datasets(cfg)

    def eval_fn(a):
        return evaluate(cfg, sharer, receiver, a, items).value

    reports, pruned = prune(adapter, eval_fn, args.k)
    write_reports_csv(out / "layers.csv", reports)
    save_adapter(out / "pruned.lcf", pruned, {"pruned_from": str(args.adapter), "k": args.k})
    print(f"retained layers {sorted(pruned.layers)}")
    return 0


def cmd_count_params(args, cfg: RunConfig | None) -> int:
    if args.pair not in accounting.PAIRS:
        raise ConfigError(f"pair: unknown pair {args.pair!r}")
    try:
        row = accounting.param_table(args.pair, args.adapter, args.d, args.layers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    sys.stdout.write(buf.getvalue())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "params.csv").write_text(buf.getvalue())
    return 0


def cmd_bench_latency(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    persist(out, cfg, "bench-latency")
    sharer, receiver = base_models(cfg)
    _, items = datasets(cfg)
    items = items[:args.n]
    if args.adapter in (None, "none"):
        adapter = new_adapter(dataclasses.replace(cfg, adapter="lcfx"), sharer, receiver)
    else:
        adapter = load_adapter(require(args.adapter))
    rows = [measure_ttft_tteoa("lcfx", items, sharer, receiver, adapter, spans_kind=cfg.span_scheme)]
    for m in (int(x) for x in args.budgets.split(",")):
        rows.append(measure_ttft_tteoa("t2t", items, sharer, receiver, budget=m))
    with open(out / "latency.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["protocol", "budget", "ttft_ms", "tteoa_ms", "n"])
        for r in rows:
            w.writerow([r.protocol, "" if r.budget is None else r.budget, f"{r.ttft_ms:.4f}", f"{r.tteoa_ms:.4f}", r.n])
    for r in rows:
        print(f"{r.protocol}{'' if r.budget is None else f'(m={r.budget})'} TTFT {r.ttft_ms:.2f} ms "
              f"TTEoA {r.tteoa_ms:.2f} ms")
    return 0


# ------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lcflow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def run_args(p, out_required=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--task", choices=("lookup", "mcq"))
        p.add_argument("--span-scheme", dest="span_scheme", choices=("natural", "token_window", "halves", "single"))
        p.add_argument("--window", type=int)
        p.add_argument("--overlap", type=int)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="write train/eval task files")
    run_args(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an adapter")
    run_args(p)
    p.add_argument("--kind", dest="adapter_kind", choices=("lcf", "lcfx", "c2c"))
    p.add_argument("--d", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate an adapter checkpoint (or none)")
    run_args(p)
    p.add_argument("--adapter", default="none", help="checkpoint path or 'none'")
    p.add_argument("--gates", choices=("trained", "closed"), default="trained")
    p.add_argument("--data", help="task file (defaults to the config's eval split)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune", help="three-pass layer selection")
    run_args(p)
    p.add_argument("--adapter", required=True)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("count-params", help="parameter and size accounting (CSV)")
    p.add_argument("--pair", default="paper")
    p.add_argument("--adapter", default="lcf", choices=("lcf", "lcfx", "pool", "c2c"))
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--layers", type=int, help="retained layer count")
    p.add_argument("--out")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("bench-latency", help="TTFT/TTEoA of text relay vs latent fusion")
    run_args(p)
    p.add_argument("--adapter", default="none", help="LCF-X checkpoint or 'none' (untrained)")
    p.add_argument("--budgets", default="10,25,50")
    p.add_argument("--n", type=int, default=200)
    p.set_defaults(func=cmd_bench_latency)
    return ap


def dispatch(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    threads = int(os.environ.get("LCF_THREADS", "1") or 1)
    try:
        with threadpool_limits(limits=max(threads, 1)):
            if args.command == "count-params":
                return args.func(args, None)
            overrides = {"seed": args.seed, "task": args.task, "span_scheme": args.span_scheme,
                         "window": args.window, "overlap": args.overlap}
            if args.command == "train":
                overrides.update(adapter=args.adapter_kind, d=args.d)
            cfg = load_run_config(args.config, overrides)
            if args.command == "train" and args.steps is not None:
                cfg.train = {**cfg.train, "max_steps": args.steps}
                cfg.train_config()
            return args.func(args, cfg)
    except ConfigError as exc:
        print(f"lcflow: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingCheckpoint, CheckpointError) as exc:
        code = EXIT_MISSING if isinstance(exc, MissingCheckpoint) else EXIT_RUNTIME
        print(f"lcflow: {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # one-line diagnostic for any runtime failure
        print(f"lcflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
