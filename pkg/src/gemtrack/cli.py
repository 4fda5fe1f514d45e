"""Command-line entry point: ``gemtrack run | compare | sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import GemError
from .harness import (VARIANTS, compare, load_summaries, parse_config, replications, run_many,
                      write_outputs)


def _run_configs(configs, out_dir, workers) -> list:
    results = run_many(configs, workers)
    summaries = []
    for cfg, (ts, s) in zip(configs, results):
        csv_path, _ = write_outputs(ts, s, cfg, out_dir)
        print(f"{s.variant:7s} seed={s.seed:<4d} mse={s.final_mse:.6g} ({s.mse_db:+.2f} dB) "
              f"active={s.final_active:.3f} -> {csv_path}")
        summaries.append(s)
    return summaries


def _write_report(report: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _print_report(report: dict) -> None:
    for row in report["seeds"]:
        flag = {True: "holds", False: "violated", None: "n/a"}[row["ordering_holds"]]
        print(f"seed {row['seed']}: ordering {' <= '.join(row['ordering'])} {flag}")
    print(f"ordering holds on {report['ordering_pass']} of {report['ordering_checked']} seeds")


def cmd_run(args) -> int:
    cfg = parse_config(args.config, variant=args.variant, seed=args.seed, horizon=args.horizon,
                       out_dir=args.out, reps=args.reps)
    _run_configs(replications(cfg), cfg.out_dir, args.workers)
    return 0


def cmd_compare(args) -> int:
    summaries = load_summaries(args.inputs)
    if len(summaries) < 2:
        print(f"need at least two summaries, found {len(summaries)} for {args.inputs!r}",
              file=sys.stderr)
        return 2
    report = compare(summaries)
    _write_report(report, args.out)
    _print_report(report)
    return 0


def cmd_sweep(args) -> int:
    variants = list(VARIANTS) if args.variants == "all" else args.variants.split(",")
    base = parse_config(args.config, horizon=args.horizon, out_dir=args.out, seed=args.seed)
    configs = []
    for v in variants:
        configs.extend(replications(base.replace(variant=v, reps=args.reps)))
    summaries = _run_configs(configs, base.out_dir, args.workers)
    report = compare(summaries)
    _write_report(report, Path(base.out_dir) / "report.json")
    _print_report(report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gemtrack",
                                description="Sensor scheduling and Markov chain tracking simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log each finished run")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one variant (optionally several seeds)")
    run.add_argument("--config", help="JSON file with ScenarioConfig fields")
    run.add_argument("--variant", choices=VARIANTS)
    run.add_argument("--seed", type=int)
    run.add_argument("--horizon", type=int)
    run.add_argument("--out", help="output directory (default: config out_dir)")
    run.add_argument("--reps", type=int, help="number of seeds, starting at --seed")
    run.add_argument("--workers", type=int, default=None, help="worker processes")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="tabulate run summaries and check the MSE ordering")
    cmp_.add_argument("--inputs", required=True, help="glob of summary JSON files")
    cmp_.add_argument("--out", default="report.json")
    cmp_.set_defaults(func=cmd_compare)

    sweep = sub.add_parser("sweep", help="run several variants over shared seeds and compare")
    sweep.add_argument("--variants", default="all", help="'all' or comma-separated list")
    sweep.add_argument("--reps", type=int, default=10)
    sweep.add_argument("--config")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--horizon", type=int)
    sweep.add_argument("--out")
    sweep.add_argument("--workers", type=int, default=None)
    sweep.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GemError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
