"""Command-line entry point.

Subcommands: train, gradcheck, plan, bench, export. Machine output is
line-delimited JSON on stdout; diagnostics go to stderr. Exit codes:
0 ok, 1 config error, 2 data error, 3 non-finite loss beyond the skip
budget, 4 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench as bench_mod
from . import checkpoint as ckpt
from . import gradcheck
from .config import ConfigError, RunConfig, load_run_config
from .data import DataError, ParseError, TokenOutOfRange
from .engine import TrainingEngine
from .errors import FtrainError
from .memplan import (PlanShape, attention_backward_lifetimes, lifetimes_from_json,
                      naive_attention_backward_peak, plan, render_plan_diagram,
                      simulate_plan_safety)
from .numerics import set_num_threads

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NONFINITE = 3
EXIT_GRADCHECK = 4


def _emit(obj) -> None:
    print(json.dumps(obj), flush=True)


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.steps is not None:
        cfg.train.steps = args.steps
    return cfg


def cmd_train(args) -> int:
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    set_num_threads(args.threads)
    try:
        engine = TrainingEngine(cfg)
        capacity = engine.setup_arena()
    except (DataError, ParseError, TokenOutOfRange) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    start_step = 0
    if args.resume:
        start_step = engine.restore(args.resume)
    _emit({"event": "config", **cfg.echo()})
    _emit({"event": "setup", "arena_capacity_elements": capacity,
           **engine.memory_report()})
    if cfg.train.steps == 0:
        return EXIT_OK

    for step in range(start_step, cfg.train.steps):
        metrics = engine.train_step(step)
        if engine.skip_count > cfg.train.skip_budget:
            _emit({"event": "abort", "reason": "non-finite loss beyond skip budget",
                   "step": step, "skips": engine.skip_count})
            return EXIT_NONFINITE
        if step % cfg.train.log_every == 0 or step == cfg.train.steps - 1:
            _emit({"event": "metrics", **metrics.as_dict()})
        if cfg.train.checkpoint_every and (step + 1) % cfg.train.checkpoint_every == 0:
            engine.save(cfg.train.checkpoint_path, step + 1)
    accuracy = engine.evaluate()
    _emit({"event": "final", "steps": cfg.train.steps, "final_accuracy": accuracy,
           "arena_high_water": engine.arena.high_water,
           "arena_reallocs": engine.arena.realloc_count,
           "skipped_steps": engine.skip_count})
    if cfg.train.checkpoint_every:
        engine.save(cfg.train.checkpoint_path, cfg.train.steps)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        _load_config(args)  # validated for side effect: config errors exit 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ok = gradcheck.run_all(instances=args.instances, seed=args.seed or 0, report=_emit)
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_plan(args) -> int:
    if args.attn_bwd:
        b, h, l, n = args.attn_bwd
        shape = PlanShape(b, h, l, n)
        lifetimes = attention_backward_lifetimes(shape)
        naive = naive_attention_backward_peak(shape)
    elif args.lifetimes:
        try:
            with open(args.lifetimes) as fh:
                lifetimes = lifetimes_from_json(json.load(fh))
        except (OSError, json.JSONDecodeError, FtrainError) as exc:
            print(f"bad lifetime input: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        naive = sum(t.size for t in lifetimes)
    else:
        print("plan needs --attn-bwd B H L N or --lifetimes FILE", file=sys.stderr)
        return EXIT_CONFIG
    p = plan(lifetimes)
    safety = simulate_plan_safety(p)
    _emit({"event": "plan", "peak": p.peak, "naive": naive,
           "savings_ratio": naive / p.peak if p.peak else 1.0,
           "blocks": p.blocks,
           "assignment": {str(k): v for k, v in p.assignment.items()},
           "safety_ok": safety.ok})
    if not args.json:
        print(render_plan_diagram(p))
    return EXIT_OK


def cmd_bench(args) -> int:
    set_num_threads(args.threads)
    results = bench_mod.run_benchmarks(rows=args.rows, cols=args.cols,
                                       seed=args.seed or 0, threads=args.threads)
    for entry in results:
        _emit({"event": "bench", **entry})
    return EXIT_OK


def cmd_export(args) -> int:
    try:
        step, tensors = ckpt.load_checkpoint(args.checkpoint)
    except (OSError, FtrainError) as exc:
        print(f"cannot export: {exc}", file=sys.stderr)
        return EXIT_DATA
    summary = {"event": "checkpoint", "step": step, "tensors": [
        {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
         "bytes": int(arr.nbytes), "l2": float(np.linalg.norm(arr.astype(np.float64)))}
        for name, arr in tensors.items()]}
    _emit(summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftrain",
                                     description="desk-scale fused transformer training engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--json", action="store_true", help="machine-readable output only")

    p_train = sub.add_parser("train", help="run the training loop")
    common(p_train)
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.set_defaults(fn=cmd_train)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p_grad)
    p_grad.add_argument("--instances", type=int, default=25)
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_plan = sub.add_parser("plan", help="static memory planning")
    common(p_plan)
    p_plan.add_argument("--attn-bwd", type=int, nargs=4, metavar=("B", "H", "L", "N"))
    p_plan.add_argument("--lifetimes", help="JSON lifetime table")
    p_plan.set_defaults(fn=cmd_plan)

    p_bench = sub.add_parser("bench", help="fused vs unfused timings")
    common(p_bench)
    p_bench.add_argument("--rows", type=int, default=4096)
    p_bench.add_argument("--cols", type=int, default=256)
    p_bench.set_defaults(fn=cmd_bench)

    p_export = sub.add_parser("export", help="checkpoint summary as JSON")
    common(p_export)
    p_export.add_argument("checkpoint")
    p_export.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
