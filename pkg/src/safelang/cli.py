"""Command-line entry point: ``safelang run|sweep|compare|eval-costpred``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .costpred import metrics_csv


def _load(args) -> harness.RunConfig:
    config = harness.RunConfig.load(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    return config.replace(**changes) if changes else config


def _fmt(x):
    return "" if x is None else f"{x:.4f}"


def cmd_run(args) -> int:
    config = _load(args)
    report = harness.run(config, workers=args.workers)
    print(json.dumps({k: report.summary[k] for k in ("arm", "config_hash", "completed_seeds",
                                                     "partial", "final_reward", "final_oracle_cost")
                      if k in report.summary}, indent=2))
    return 0 if report.complete else 1


def cmd_sweep(args) -> int:
    config = _load(args)
    thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    table = harness.sweep_threshold(config, thresholds)
    print("threshold,precision,recall,f1")
    for t, p, r, f in table:
        print(f"{t},{_fmt(p)},{_fmt(r)},{_fmt(f)}")
    return 0


def cmd_compare(args) -> int:
    table = harness.compare_arms(args.reports)
    text = harness.comparison_csv(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_eval(args) -> int:
    config = _load(args)
    counts = harness.eval_costpred(config)
    text = metrics_csv([(config.hash, arm, c) for arm, c in counts.items()], config.hash)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safelang", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory override"):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("run", help="train every seed of one arm")
    common(sp)
    sp.add_argument("--workers", type=int, default=1, help="parallel seed workers")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="precision/recall/F1 over thresholds")
    common(sp)
    sp.add_argument("--thresholds", required=True, help="comma-separated list, e.g. 0.1,0.2,0.4")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare", help="summarize finished runs side by side")
    sp.add_argument("reports", nargs="+", help="run output directories or summary.json files")
    sp.add_argument("--out", help="write the comparison CSV here")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("eval-costpred", help="confusion counts, fine-tuned vs untuned embedder")
    common(sp, out_help="write the metrics CSV here")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
