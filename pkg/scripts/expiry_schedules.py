"""Replay random use/tick/update schedules against an honest TEE and check expiry safety.

    python scripts/expiry_schedules.py --count 100000 --length 20
"""

import argparse
import random
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from support import random_schedule, run_schedule  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=10_000)
    ap.add_argument("--length", type=int, default=12, help="operations per schedule")
    ap.add_argument("--seed", type=int, default=0, help="first schedule seed")
    args = ap.parse_args()

    t0 = time.perf_counter()
    bad = 0
    for seed in range(args.seed, args.seed + args.count):
        problems = run_schedule(random_schedule(random.Random(seed), args.length))
        if problems:
            bad += 1
            print(f"seed {seed}: {problems[0]}")
    elapsed = time.perf_counter() - t0
    print(f"{args.count} schedules x {args.length} ops: {bad} unsafe, {elapsed:.2f}s")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
