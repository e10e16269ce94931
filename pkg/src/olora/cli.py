"""Command line entry point: ``olora run | compare | gradcheck``.

Exit codes: 0 success, 1 configuration error, 2 a check or ordering failed,
3 runtime error (including interruption).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

from olora.config import METHODS, RunConfig
from olora.errors import ConfigError
from olora.experiment import ComparisonError, compare, format_comparison, load_summaries, run_experiment
from olora.gradcheck import TOLERANCE, run_gradcheck
from olora.regularizers import MODES
from olora.tensor import inject_backward_fault

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("olora")


def _floats(text: str, n: int, flag: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if not 1 <= len(vals) <= n:
        raise ConfigError(f"{flag}: expected 1 to {n} values, got {len(vals)}")
    return vals


def resolve_config(args) -> RunConfig:
    """Config file (if any) overlaid with explicit flags."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes: dict = {}
    if args.method:
        methods = [m for chunk in args.method for m in chunk.split(",") if m]
        if "all" in methods:
            methods = list(METHODS)
        changes["methods"] = tuple(methods)
    if args.seeds is not None:
        try:
            changes["seeds"] = tuple(int(s) for s in args.seeds.split(","))
        except ValueError:
            raise ConfigError(f"seeds: expected comma-separated integers, got {args.seeds!r}") from None
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.tasks is not None:
        try:
            changes["tasks"] = dataclasses.replace(cfg.tasks, n_tasks=args.tasks)
        except TypeError as exc:
            raise ConfigError(f"tasks: {exc}") from None
    if args.steps is not None:
        vals = _floats(args.steps, 2, "steps")
        changes["steps_first"] = int(vals[0])
        changes["steps_later"] = int(vals[-1])
    if args.lr is not None:
        vals = _floats(args.lr, 3, "lr")
        changes["lr_first"] = vals[0]
        if len(vals) > 1:
            changes["lr_later"] = vals[1]
        if len(vals) > 2:
            changes["lr_full_ft"] = vals[2]
    for flag, field in (("rank", "rank"), ("rank_init", "rank_init"), ("rank_target", "rank_target"),
                        ("lambda1", "lambda1"), ("lambda2", "lambda2"), ("out", "out")):
        value = getattr(args, flag)
        if value is not None:
            changes[field] = value
    return dataclasses.replace(cfg, **changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    log.info("running %s x seeds %s into %s", ",".join(cfg.methods), list(cfg.seeds), out)
    summaries = run_experiment(cfg, out)
    for s in summaries:
        ranks = s.get("ranks")
        extra = f" final_rank={ranks['final_total']}" if ranks else ""
        print(f"{s['method']:<10} seed={s['seed']} avg_forgetting={s['forgetting']['average']:.4f} "
              f"final_avg_loss={s['forgetting']['final_average_loss']:.4f}{extra}")
    return EXIT_OK


def cmd_compare(args) -> int:
    summaries = load_summaries(args.summaries)
    try:
        result = compare(summaries)
    except ComparisonError as exc:
        print(f"comparison error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(format_comparison(result))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if args.check and any(ok is False for ok in result["orderings"].values()):
        return EXIT_CHECK
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    modes = args.mode or None
    if args.inject_fault:
        with inject_backward_fault(*args.inject_fault):
            results = run_gradcheck(modes)
    else:
        results = run_gradcheck(modes)
    failed = False
    for r in results:
        if r.skipped:
            print(f"SKIP {r.name}")
        else:
            status = "PASS" if r.passed else "FAIL"
            failed |= not r.passed
            print(f"{status} {r.name} max_rel_err={r.error:.3e}")
    print(f"tolerance {TOLERANCE:g}: {'FAILED' if failed else 'all checks passed'}")
    return EXIT_CHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="olora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate methods over the task sequence")
    run.add_argument("--config", help="JSON file mirroring RunConfig")
    run.add_argument("--method", action="append", help=f"one of {', '.join(METHODS)} or 'all'; repeatable")
    run.add_argument("--seeds", help="comma-separated seeds")
    run.add_argument("--seed", type=int, help="single seed (overrides --seeds)")
    run.add_argument("--tasks", type=int, help="number of tasks in the sequence")
    run.add_argument("--steps", help="steps per stage: FIRST[,LATER]")
    run.add_argument("--rank", type=int, help="LoRA rank")
    run.add_argument("--rank-init", dest="rank_init", type=int)
    run.add_argument("--rank-target", dest="rank_target", type=int)
    run.add_argument("--lambda1", type=float)
    run.add_argument("--lambda2", type=float)
    run.add_argument("--lr", help="learning rates: FIRST[,LATER[,FULL_FT]]")
    run.add_argument("--out", help="output directory")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="tabulate summaries and check the orderings")
    cmp_.add_argument("summaries", nargs="+", help="summary.json files or run directories")
    cmp_.add_argument("--out", help="write the comparison as JSON")
    cmp_.add_argument("--check", action="store_true", help="exit 2 if an ordering fails")
    cmp_.set_defaults(func=cmd_compare)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and loss mode")
    gc.add_argument("--mode", action="append", choices=MODES)
    gc.add_argument("--inject-fault", action="append", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.filterwarnings("ignore", message="rank .* is not small")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
