"""Command-line entry points: run, sweep, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import apply_overrides, load_config
from .errors import ConfigError
from .harness import run_and_write


def _parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _mean_summary(per_seed: List[Dict[str, object]]) -> Dict[str, object]:
    keys = ("final_accuracy", "final_asr", "mean_inference_accuracy",
            "mean_malicious_trust", "mean_honest_trust")
    out: Dict[str, object] = {
        "seeds": [s["seed"] for s in per_seed],
        "aggregator": per_seed[0]["aggregator"],
        "attack": per_seed[0]["attack"],
    }
    for key in keys:
        values = [s[key] for s in per_seed if s.get(key) is not None]
        out[key] = float(np.mean(values)) if values else None
    return out


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _parse_overrides(args.override))
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"seed": str(args.seed)})
    out_dir = Path(args.out) if args.out else Path(cfg.out_dir)
    summaries = []
    for rep in range(args.repeats):
        run_cfg = apply_overrides(cfg, {"seed": str(cfg.seed + rep)}) if rep else cfg
        summary = run_and_write(run_cfg, out_dir)
        summaries.append(summary)
        print(f"seed {run_cfg.seed}: accuracy={summary['final_accuracy']:.4f} "
              f"asr={summary['final_asr']:.4f}")
    if args.repeats > 1:
        mean = _mean_summary(summaries)
        (out_dir / "summary_mean.json").write_text(json.dumps(mean, indent=2) + "\n")
        print(f"mean over {args.repeats} seeds: accuracy={mean['final_accuracy']:.4f} "
              f"asr={mean['final_asr']:.4f}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _parse_overrides(args.override))
    key = args.param
    values = [v for v in args.values.split(",") if v != ""]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    out_dir = Path(args.out) if args.out else Path(cfg.out_dir)
    rows = []
    for value in values:
        per_seed = []
        for seed in seeds:
            run_cfg = apply_overrides(cfg, {key: value, "seed": str(seed)})
            sub = out_dir / f"{key}_{value}"
            per_seed.append(run_and_write(run_cfg, sub))
        mean = _mean_summary(per_seed)
        mean[key] = value
        rows.append(mean)
        print(f"{key}={value}: accuracy={mean['final_accuracy']:.4f} "
              f"asr={mean['final_asr']:.4f}")
    (out_dir / f"sweep_{key}.json").write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.dir)
    summaries = sorted(root.rglob("summary_*.json"))
    if not summaries:
        print(f"no summaries under {root}", file=sys.stderr)
        return 1

    def fmt(value, width, prec):
        if isinstance(value, (int, float)):
            return f"{value:{width}.{prec}f}"
        return " " * width

    print(f"{'run':42s} {'accuracy':>9s} {'asr':>7s} {'mal_trust':>10s}")
    for path in summaries:
        s = json.loads(path.read_text())
        name = path.stem.removeprefix("summary_")
        print(f"{name:42s} {fmt(s.get('final_accuracy'), 9, 4)} "
              f"{fmt(s.get('final_asr'), 7, 4)} "
              f"{fmt(s.get('mean_malicious_trust'), 10, 5)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulator with a "
                    "distribution-aware backdoor defense.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment configuration")
    p_run.add_argument("config", nargs="?", default=None,
                       help="flat key=value config file (defaults apply if omitted)")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--override", action="append", metavar="KEY=VALUE")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--repeats", type=int, default=1,
                       help="run this many consecutive seeds and report the mean")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid over one config key")
    p_sweep.add_argument("config", nargs="?", default=None)
    p_sweep.add_argument("--param", required=True, help="config key to sweep")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds")
    p_sweep.add_argument("--override", action="append", metavar="KEY=VALUE")
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="summarize run outputs")
    p_report.add_argument("dir", help="directory containing summary_*.json files")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
