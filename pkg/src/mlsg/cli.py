"""Command line entry point: ``mlsg <subcommand> --config PATH``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .optimizers import save_reference, solve_reference


def _config(args, strategy=None) -> harness.ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    if strategy:
        raw["strategy"] = strategy
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output"] = args.out
    if getattr(args, "reps", None) is not None:
        raw["repetitions"] = args.reps
    if getattr(args, "iters", None) is not None:
        raw["iterations"] = args.iters
    return harness.ExperimentConfig.from_dict(raw)


def cmd_run(args):
    cfg = _config(args, args.strategy)
    summary = harness.run_experiment(cfg)
    print(f"wrote {summary['csv']} ({summary['rows']} rows)")
    for key in ("slope_vs_j", "slope_vs_cost"):
        if key in summary:
            print(f"{key}: {summary[key]:.4f}")


def cmd_reference(args):
    cfg = _config(args, "reference")
    spec = cfg.reference or {}
    data = cfg.problem()
    sol = solve_reference(data, q=spec.get("q", 3), level=spec.get("level", 4),
                          max_iters=spec.get("max_iters", 60),
                          grad_tol=spec.get("grad_tol", 1e-10))
    path = Path(spec.get("path", Path(cfg.output) / "reference.txt"))
    digest = save_reference(path, sol.control, q=sol.q, grad_norm=f"{sol.grad_norm:.6e}")
    print(f"wrote {path} sha256={digest} iterations={len(sol.grad_norms) - 1} "
          f"grad_norm={sol.grad_norm:.3e} converged={sol.converged}")


def cmd_screen(args):
    cfg = _config(args, "screen")
    stats = harness.run_screen(cfg)
    path = Path(cfg.output) / "screen.csv"
    harness.write_screen(stats, path)
    print(f"wrote {path}")


def cmd_validate(args):
    cfg = _config(args, "validate-rates")
    report = harness.validate_rates(cfg)
    path = Path(cfg.output) / "validate_rates.json"
    harness._write_json(path, report)
    status = "PASS" if report["passed"] else "FAIL"
    print(f"{status} level-variance slope {report['slope']:.3f} in {report['band']}; "
          f"C_star = {report['C_star']:.4g}")
    return 0 if report["passed"] else 1


def cmd_plot_data(args):
    path = harness.plot_data(args.inputs, Path(args.out or ".") / "figure_data.csv")
    print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlsg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=False):
        p.add_argument("--config", type=str, help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=str, help="output directory")
        if runs:
            p.add_argument("--reps", type=int)
            p.add_argument("--iters", type=int)

    p = sub.add_parser("run", help="run a stochastic gradient experiment")
    common(p, runs=True)
    p.add_argument("--strategy", choices=["mlsg", "rmlsg", "rm-baseline"])
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("reference", help="compute and cache the reference control")
    common(p)
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("screen", help="level-difference screening at u = 0")
    common(p)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("validate-rates", help="check the level-variance decay rate")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plot-data", help="merge trace CSVs into figure-ready data")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", type=str)
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (harness.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
