"""Command-line entry point.

Exit codes: 0 success, 1 invariant violation (including a failed gradient
check), 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config, with_overrides
from .errors import ConfigError, PatrolError

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patrolmarl", description="Energy-aware multi-agent patrolling.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
        if checkpoint:
            p.add_argument("--checkpoint", action="append", default=[],
                           help="policy checkpoint; repeat for per-actor files")
        return p

    common(sub.add_parser("train", help="train a policy"))
    common(sub.add_parser("eval-battery", help="battery-at-recharge and failure-rate table"), True)
    common(sub.add_parser("eval-patrol", help="idleness statistics per agent count"), True)
    common(sub.add_parser("eval-fault", help="daily series under agent failures and additions"), True)
    g = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    g.add_argument("--seeds", type=int, default=20)
    r = sub.add_parser("repro-index", help="write the reproduction index from run manifests")
    r.add_argument("--runs", default="runs/desk")
    r.add_argument("--out", default="docs/REPRODUCTION.md")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            from .gradcheck import format_report, run_suite
            results = run_suite(seeds=range(args.seeds))
            print(format_report(results))
            return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT
        if args.command == "repro-index":
            from .docs import generate_repro_index
            generate_repro_index(args.runs, args.out)
            print(f"wrote {args.out}")
            return EXIT_OK

        from . import experiments as ex
        cfg = with_overrides(load_config(args.config), seed=args.seed)
        out = Path(args.out or cfg.out)
        plots = cfg.eval.plots and not args.no_plots
        if args.command == "train":
            def progress(row):
                print(f"round {row['round']}: reward/agent {float(row['reward_per_agent']):.2f} "
                      f"battery@recharge {float(row['battery_at_recharge']):.3f} failures {row['failures']}",
                      flush=True)
            result = ex.cmd_train(cfg, out, plots, progress)
        else:
            policy = ex.load_policy(args.checkpoint) if args.checkpoint else None
            cmd = {"eval-battery": ex.cmd_eval_battery, "eval-patrol": ex.cmd_eval_patrol,
                   "eval-fault": ex.cmd_eval_fault}[args.command]
            result = cmd(cfg, policy, out, plots)
        for f in result.files:
            print(f)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PatrolError as exc:
        print(f"invariant violation: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
