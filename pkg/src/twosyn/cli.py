"""Command-line runner.

Executes one scenario (built-in name or scenario file) under one policy or
the scenario's whole comparison roster, with optional repetitions, writing
per-run CSV reports plus a summary.csv and a plain-text comparison table.

Every (scenario, policy, repetition) triple runs on its own derived sub-seed,
so results do not shift when policies are added or runs execute in parallel.

Exit codes: 0 success, 1 run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import os
import sys
from dataclasses import dataclass
from typing import Optional

from .metrics import export_csv, fct_percentile, fct_stddev, mean_fct, verify_run
from .nettopo import FlowKeyMode
from .runner import run_scenario
from .scenarios import Scenario, ScenarioError, builtin_scenario, builtin_suite, load_scenario_file
from .simcore import derive_subseed, msec


@dataclass(frozen=True)
class RunSpec:
    scenario: Scenario
    policy: str
    rep: int
    seed: int
    out_dir: Optional[str]


@dataclass(frozen=True)
class RunSummary:
    scenario: str
    policy: str
    rep: int
    flows: int
    completed: int
    mean_fct_s: float
    stddev_s: float
    p50_s: float
    p99_s: float
    violations: int


def _execute(spec: RunSpec) -> RunSummary:
    report = run_scenario(spec.scenario, spec.policy, spec.seed)
    if spec.out_dir is not None:
        run_dir = os.path.join(
            spec.out_dir, spec.scenario.name, spec.policy, f"rep{spec.rep}"
        )
        export_csv(report, run_dir)
    completed = [r for r in report.foreground_records() if r.completed]
    problems = verify_run(report)
    if completed:
        summary = RunSummary(
            scenario=spec.scenario.name,
            policy=report.policy,
            rep=spec.rep,
            flows=len(report.foreground_records()),
            completed=len(completed),
            mean_fct_s=mean_fct(report),
            stddev_s=fct_stddev(report),
            p50_s=fct_percentile(report, 0.50),
            p99_s=fct_percentile(report, 0.99),
            violations=len(problems),
        )
    else:
        summary = RunSummary(
            spec.scenario.name, report.policy, spec.rep, len(report.foreground_records()),
            0, float("nan"), float("nan"), float("nan"), float("nan"), len(problems),
        )
    return summary


def _aggregate(summaries: list[RunSummary]) -> list[tuple]:
    """One summary row per (scenario, policy), pooling repetitions."""
    by_key: dict[tuple[str, str], list[RunSummary]] = {}
    order: list[tuple[str, str]] = []
    for s in summaries:
        key = (s.scenario, s.policy)
        if key not in by_key:
            by_key[key] = []
            order.append(key)
        by_key[key].append(s)
    rows = []
    for key in order:
        group = sorted(by_key[key], key=lambda s: s.rep)
        means = [g.mean_fct_s for g in group if g.completed]
        mean = sum(means) / len(means) if means else float("nan")
        p50 = sorted(g.p50_s for g in group)[len(group) // 2]
        p99 = max(g.p99_s for g in group)
        stddev = max(g.stddev_s for g in group)
        rows.append(
            (
                key[0],
                key[1],
                sum(g.flows for g in group),
                sum(g.completed for g in group),
                mean,
                stddev,
                p50,
                p99,
                sum(g.violations for g in group),
            )
        )
    return rows


def _write_summary(rows: list[tuple], out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "summary.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("scenario,policy,flows,completed,mean_fct_s,stddev_s,p50_s,p99_s,violations\n")
        for row in rows:
            fh.write(
                f"{row[0]},{row[1]},{row[2]},{row[3]},"
                f"{row[4]:.9f},{row[5]:.9f},{row[6]:.9f},{row[7]:.9f},{row[8]}\n"
            )
    return path


def _print_table(rows: list[tuple]) -> None:
    header = f"{'scenario':<16} {'policy':<10} {'flows':>6} {'done':>6} {'mean FCT [s]':>13} {'p50 [s]':>9} {'p99 [s]':>9}"
    print(header)
    print("-" * len(header))
    for row in rows:
        print(
            f"{row[0]:<16} {row[1]:<10} {row[2]:>6} {row[3]:>6} "
            f"{row[4]:>13.4f} {row[6]:>9.4f} {row[7]:>9.4f}"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twosyn",
        description="Run multihoming path-selection experiments and emit CSV reports.",
    )
    parser.add_argument(
        "--scenario",
        required=True,
        help="built-in scenario name, scenario file path, or 'suite' for all built-ins",
    )
    parser.add_argument(
        "--policy",
        default="all",
        help="policy name (static1, static2, random, 2syn, egreedy, ucb, thompson) or 'all'",
    )
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--reps", type=int, default=1, help="repetitions per policy")
    parser.add_argument("--out", default=None, help="output directory for CSV reports")
    parser.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    parser.add_argument(
        "--flow-key",
        choices=["5tuple", "ippair"],
        default=None,
        help="override the scenario's flow key mode",
    )
    parser.add_argument(
        "--route-update-delay-ms",
        type=float,
        default=None,
        help="model per-route-update cost (e.g. 4 for the measured average)",
    )
    return parser


def _resolve_scenarios(name: str, seed: int) -> list[Scenario]:
    if name == "suite":
        return builtin_suite(seed)
    if os.path.exists(name) and not name == "suite":
        return [load_scenario_file(name).with_seed(seed)]
    return [builtin_scenario(name, seed)]


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.reps < 1:
        parser.error("--reps must be >= 1")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")

    try:
        scenarios = _resolve_scenarios(args.scenario, args.seed)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    specs: list[RunSpec] = []
    for scenario in scenarios:
        if args.flow_key is not None:
            scenario = dataclasses.replace(scenario, flow_key_mode=FlowKeyMode(args.flow_key))
        if args.route_update_delay_ms is not None:
            scenario = dataclasses.replace(
                scenario, route_update_delay_ns=msec(args.route_update_delay_ms)
            )
        if args.policy == "all":
            policies = list(scenario.compare_policies)
        else:
            policies = [args.policy]
        known = {"static1", "static2", "random", "2syn", "egreedy", "ucb", "thompson"}
        for policy in policies:
            if policy not in known and not policy.startswith("static"):
                print(f"error: unknown policy {policy!r}", file=sys.stderr)
                return 2
            for rep in range(args.reps):
                sub = derive_subseed(args.seed, scenario.name, policy, rep)
                specs.append(RunSpec(scenario, policy, rep, sub, args.out))

    try:
        if args.jobs == 1:
            summaries = [_execute(spec) for spec in specs]
        else:
            with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
                summaries = list(pool.map(_execute, specs))
    except Exception as exc:  # surfaced per-run; any failure fails the invocation
        print(f"run failed: {exc}", file=sys.stderr)
        return 1

    rows = _aggregate(summaries)
    if args.out is not None:
        path = _write_summary(rows, args.out)
        print(f"summary written to {path}")
    _print_table(rows)
    total_violations = sum(row[8] for row in rows)
    if total_violations:
        print(f"WARNING: {total_violations} invariant violation(s); see per-run reports")
    return 0


if __name__ == "__main__":
    sys.exit(main())
