"""Command line entry point: ``run``, ``validate`` and ``demo``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (
    PROCESSES,
    RunReport,
    ScenarioError,
    bundled_scenario_path,
    load_scenario,
    run_scenario,
    validate_scenario,
)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

SECTIONS = (
    "Pod initiation",
    "Resource initiation",
    "Resource indexing",
    "Resource access",
    "Policy modification",
    "Policy monitoring",
)


class UsageError(Exception):
    pass


def _resolve(path: str) -> Path:
    p = Path(path)
    if p.is_file():
        return p
    bundled = bundled_scenario_path(p.name) if p.parent == Path(".") else None
    if bundled is None:
        raise UsageError(f"no such scenario: {path}")
    return bundled


def _load(path: str):
    try:
        return load_scenario(_resolve(path))
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None


def cmd_run(args: argparse.Namespace) -> int:
    scenario = _load(args.scenario)
    if scenario is None:
        return EXIT_FAILED
    try:
        report = run_scenario(scenario, seed=args.seed)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.report is not None:
            _emit(exc.report, args)
        return EXIT_FAILED
    _emit(report, args)
    return EXIT_OK if report.ok else EXIT_FAILED


def _emit(report: RunReport, args: argparse.Namespace) -> None:
    if args.trace:
        Path(args.trace).write_text(report.trace_text(), encoding="utf-8")
    if args.report:
        Path(args.report).write_text(report.render(), encoding="utf-8")
    else:
        sys.stdout.write(report.render())


def cmd_validate(args: argparse.Namespace) -> int:
    scenario = _load(args.scenario)
    if scenario is None:
        return EXIT_FAILED
    issues = validate_scenario(scenario)
    for index, reason in issues:
        print(f"step {index}: {reason}")
    if not issues:
        print("ok")
    return EXIT_FAILED if issues else EXIT_OK


def narrate(report: RunReport) -> str:
    out = []
    for n, section in enumerate(SECTIONS, 1):
        out.append(f"== {n}. {section}")
        for rec in report.steps:
            if PROCESSES.get(rec.step.action) != section:
                continue
            out.append(f"  {rec.step.describe()} -> {rec.outcome}")
            out += [f"      {line}" for line in rec.trace]
        out.append("")
    out.append("-- local enforcement")
    for rec in report.steps:
        if rec.step.action == "Use":
            out.append(f"  {rec.step.describe()} -> {rec.outcome}")
    for name, text in report.usage_logs.items():
        for line in text.splitlines():
            if " Deleted(" in line:
                out.append(f"  {name}'s TEE: {line}")
    out.append("")
    out.append(f"final head {report.final_head_hash.hex()} at height {report.height}")
    out.append("all assertions passed" if report.ok else "ASSERTIONS FAILED")
    return "\n".join(out) + "\n"


def cmd_demo(args: argparse.Namespace) -> int:
    scenario = load_scenario(bundled_scenario_path("alice_bob.scn"))
    try:
        report = run_scenario(scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    sys.stdout.write(narrate(report))
    return EXIT_OK if report.ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solid-ucon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario and print its report")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--trace", help="write the oracle trace here")
    run.add_argument("--report", help="write the report here instead of stdout")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a scenario without running it")
    val.add_argument("scenario")
    val.set_defaults(func=cmd_validate)

    demo = sub.add_parser("demo", help="narrate the bundled Alice/Bob scenario")
    demo.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
