"""Command-line experiment runner.

    augserve simulate --synthetic infercept --n 500 --rate 1 --policy fcfs,lamps --out runs/
    augserve compare runs/fcfs.json runs/lamps.json --csv cmp.csv
    augserve example
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

from .core import CostModel, DomainError
from .engine import EngineConfig, StallError, worked_example_config
from .metrics import SimReport, TraceMismatch, compare, format_table, simulate, write_csv
from .scheduler import POLICY_ORDER, Policy, SchedulerConfig
from .workload import (
    TraceError,
    generate_synthetic,
    load_class_config,
    load_trace,
    parse_predictor,
    worked_example_trace,
)

EXIT_INVALID = 2
EXIT_INFEASIBLE = 3


class UsageError(ValueError):
    pass


def _policies(text: str) -> list[Policy]:
    if text == "all":
        return list(POLICY_ORDER)
    try:
        return [Policy(p.strip()) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _threshold(text) -> float:
    if text is None or str(text).lower() in ("inf", "none", "off"):
        return math.inf
    return float(text)


def add_simulate_args(p: argparse.ArgumentParser) -> None:
    src = p.add_argument_group("workload")
    src.add_argument("--trace", type=Path, help="JSONL trace file")
    src.add_argument("--synthetic", metavar="CLASS_CONFIG", help="builtin class set name or JSON file")
    src.add_argument("--n", type=int, default=500, help="synthetic request count")
    src.add_argument("--rate", type=float, default=1.0, help="synthetic arrival rate (req/s)")
    src.add_argument("--max-apis", type=int, default=None, help="cap on API calls per synthetic request")
    src.add_argument("--decode-max", type=int, default=200, help="longest synthetic decode segment")
    src.add_argument("--save-trace", type=Path, help="write the synthetic trace as JSONL")

    sch = p.add_argument_group("scheduler")
    sch.add_argument("--policy", default="lamps", help="fcfs|sjf|sjf-total|lamps, comma list, or 'all'")
    sch.add_argument("--memory-budget", type=float, default=4096)
    sch.add_argument("--max-batch-tokens", type=int, default=8192)
    sch.add_argument("--max-batch-size", type=int, default=64)
    sch.add_argument("--starvation-threshold", default="100", help="iterations, or 'inf' to disable")
    sch.add_argument("--score-interval", type=int, default=1)

    pr = p.add_argument_group("prediction and cost")
    pr.add_argument("--predictor", default="oracle", choices=["oracle", "binned", "noisy", "noisy-binned"])
    pr.add_argument("--error-param", type=float, default=0.0, help="relative error p for noisy predictors")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--unit-mode", action="store_true", help="one iteration = one time unit")
    pr.add_argument("--horizon", type=float, default=math.inf, help="stop simulating after this time")

    out = p.add_argument_group("output")
    out.add_argument("--out", type=Path, help="report JSON (a directory when several policies run)")
    out.add_argument("--event-log", type=Path, help="JSONL event log (single policy only)")
    out.add_argument("--csv", type=Path, help="comparison table as CSV")
    out.add_argument("--baseline", default="fcfs", help="policy the deltas are computed against")
    out.add_argument("--jobs", type=int, default=1, help="worker processes for multi-policy runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augserve", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one or more policies on a trace")
    sim.add_argument("--config", type=Path, help="JSON file whose keys mirror the flags")
    add_simulate_args(sim)

    cmp_ = sub.add_parser("compare", help="tabulate saved reports against a baseline")
    cmp_.add_argument("reports", nargs="+", type=Path)
    cmp_.add_argument("--baseline", default="fcfs")
    cmp_.add_argument("--csv", type=Path)

    ex = sub.add_parser("example", help="replay the three-request worked example")
    ex.add_argument("--csv", type=Path)
    return parser


def apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; for ``simulate``, values from ``--config`` fill anything not given as a flag."""
    args = parser.parse_args(argv)
    if args.command != "simulate" or args.config is None:
        return args
    try:
        config = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(config, dict):
        raise UsageError("config file must hold a JSON object")
    sim = parser._subparsers._group_actions[0].choices["simulate"]
    known = {a.dest for a in sim._actions}
    defaults = {}
    for key, value in config.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        defaults[dest] = value
    sim.set_defaults(**defaults)
    args = parser.parse_args(argv)
    for dest in ("trace", "out", "event_log", "csv", "save_trace"):
        if isinstance(getattr(args, dest), str):
            setattr(args, dest, Path(getattr(args, dest)))
    return args


def _load_workload(args):
    if (args.trace is None) == (args.synthetic is None):
        raise UsageError("give exactly one of --trace or --synthetic")
    if args.trace is not None:
        return load_trace(args.trace)
    classes = load_class_config(args.synthetic)
    trace = generate_synthetic(
        classes, args.n, args.rate, args.seed, decode_range=(1, args.decode_max), max_apis=args.max_apis
    )
    if args.save_trace:
        from .workload import save_trace

        save_trace(trace, args.save_trace)
    return trace


def engine_configs(args) -> list[EngineConfig]:
    cost = CostModel.units() if args.unit_mode else CostModel()
    predictor = parse_predictor(args.predictor, args.error_param)
    return [
        EngineConfig(
            cost=cost,
            scheduler=SchedulerConfig(
                policy=policy,
                starvation_threshold=_threshold(args.starvation_threshold),
                score_update_interval=args.score_interval,
                max_batch_tokens=args.max_batch_tokens,
                max_batch_size=args.max_batch_size,
                memory_budget=args.memory_budget,
            ),
            predictor=predictor,
            seed=args.seed,
            horizon=args.horizon,
        )
        for policy in _policies(args.policy)
    ]


def _run_one(item):
    trace, cfg = item
    return simulate(trace, cfg)


def _emit(reports: dict[str, SimReport], baseline: str, csv_path: Path | None) -> None:
    if baseline not in reports:
        baseline = next(iter(reports))
    rows = compare(reports, baseline)
    print(format_table(rows))
    for r in reports.values():
        if r.rejected:
            print(f"{r.policy}: {len(r.rejected)} request(s) rejected", file=sys.stderr)
        if r.unfinished:
            print(f"{r.policy}: {len(r.unfinished)} request(s) unfinished at horizon", file=sys.stderr)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            write_csv(rows, fh)


def cmd_simulate(args) -> int:
    trace = _load_workload(args)
    cfgs = engine_configs(args)
    if not cfgs:
        raise UsageError("no policy given")
    if args.event_log and len(cfgs) > 1:
        raise UsageError("--event-log needs a single policy")
    if len(cfgs) == 1:
        if args.event_log:
            with open(args.event_log, "w") as sink:
                reports = [simulate(trace, cfgs[0], sink)]
        else:
            reports = [simulate(trace, cfgs[0])]
    elif args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(_run_one, [(trace, c) for c in cfgs]))
    else:
        reports = [simulate(trace, c) for c in cfgs]
    by_policy = {r.policy: r for r in reports}

    if args.out:
        if len(reports) == 1 and args.out.suffix == ".json":
            args.out.parent.mkdir(parents=True, exist_ok=True)
            args.out.write_text(json.dumps(reports[0].to_dict(), indent=1))
        else:
            args.out.mkdir(parents=True, exist_ok=True)
            for r in reports:
                (args.out / f"{r.policy}.json").write_text(json.dumps(r.to_dict(), indent=1))
    _emit(by_policy, args.baseline, args.csv)
    if any(r.rejected for r in reports):
        return EXIT_INFEASIBLE
    return 0


def cmd_compare(args) -> int:
    reports = {}
    for path in args.reports:
        try:
            rep = SimReport.from_dict(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise UsageError(f"cannot read report {path}: {exc}") from None
        rep.check_consistent()
        reports[rep.policy] = rep
    if args.baseline not in reports:
        raise UsageError(f"baseline {args.baseline!r} not among {sorted(reports)}")
    _emit(reports, args.baseline, args.csv)
    return 0


def cmd_example(args) -> int:
    trace = worked_example_trace()
    reports = {}
    for policy in POLICY_ORDER:
        rep = simulate(trace, worked_example_config(policy))
        reports[policy.value] = rep
        jct = sum(Fraction(t.completion) - Fraction(t.arrival) for t in rep.timelines) / len(rep.timelines)
        done = ", ".join(f"{t.id}={t.completion:g}" for t in rep.timelines)
        print(f"{policy.value:10s} mean JCT {str(jct):>5s} = {float(jct):.4f}   ({done})")
    print()
    _emit(reports, "fcfs", args.csv)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = apply_config(parser, argv)
        handler = {"simulate": cmd_simulate, "compare": cmd_compare, "example": cmd_example}[args.command]
        return handler(args)
    except (UsageError, TraceError, DomainError, TraceMismatch, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StallError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
