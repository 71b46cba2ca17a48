"""Rewrite the golden trace files under tests/golden/.

Each ``<name>.scn`` starts with ``# workflow: <process>``; its golden
``<name>.trace`` holds only the trace lines of that workflow's steps.
``alice_bob.trace`` is the full trace of the bundled scenario.

    python scripts/regen_golden.py [--check]
"""

import argparse
import sys
from pathlib import Path

from solid_ucon.harness import bundled_scenario_path, load_scenario, run_scenario, workflow_lines

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"


def expected_traces() -> dict[Path, str]:
    out = {}
    for scn in sorted(GOLDEN.glob("*.scn")):
        process = scn.read_text("utf-8").splitlines()[0].split(":", 1)[1].strip()
        report = run_scenario(load_scenario(scn))
        out[scn.with_suffix(".trace")] = "".join(f"{line}\n" for line in workflow_lines(report, process))
    full = run_scenario(load_scenario(bundled_scenario_path("alice_bob.scn")))
    out[GOLDEN / "alice_bob.trace"] = full.trace_text()
    return out


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--check", action="store_true", help="report drift instead of rewriting")
    args = ap.parse_args()
    drift = 0
    for path, text in expected_traces().items():
        current = path.read_text("utf-8") if path.exists() else None
        if current == text:
            continue
        drift += 1
        print(f"{'differs' if args.check else 'wrote'}: {path.name}")
        if not args.check:
            path.write_text(text, encoding="utf-8")
    return 1 if (args.check and drift) else 0


if __name__ == "__main__":
    sys.exit(main())
