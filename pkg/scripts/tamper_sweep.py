"""Flip random single bytes in a committed chain and tally what verify_chain reports.

    python scripts/tamper_sweep.py --blocks 50 --runs 1000 --seed 1
"""

import argparse
import random
import sys
import time
from collections import Counter
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from support import build_chain, mutate_one_byte  # noqa: E402

from solid_ucon.ledger import verify_chain  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--blocks", type=int, default=50)
    ap.add_argument("--runs", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    ledger = build_chain(args.blocks)
    print(f"pristine chain of {args.blocks} blocks: {verify_chain(ledger)}")
    rng = random.Random(args.seed)
    by_reason: Counter[str] = Counter()
    by_field: Counter[str] = Counter()
    missed = 0
    t0 = time.perf_counter()
    for _ in range(args.runs):
        blocks, _bi, name = mutate_one_byte(ledger.blocks, rng)
        verdict = str(verify_chain(ledger, blocks))
        by_field[name] += 1
        if verdict.startswith("Corrupt"):
            by_reason[verdict.split(", ", 1)[1].rstrip(")").split(":")[0]] += 1
        else:
            missed += 1
    elapsed = time.perf_counter() - t0
    print(f"{args.runs - missed}/{args.runs} mutations detected in {elapsed:.2f}s")
    print("fields hit:", ", ".join(f"{k}={v}" for k, v in by_field.most_common()))
    print("first failing check:", ", ".join(f"{k}={v}" for k, v in by_reason.most_common()))
    return 1 if missed else 0


if __name__ == "__main__":
    sys.exit(main())
