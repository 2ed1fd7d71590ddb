#!/usr/bin/env python3
"""Crash at every flush index of a small run and verify each recovered log.

    python scripts/crash_sweep.py --ops 20
    python scripts/crash_sweep.py --ops 6 --threads 2 --ordering random_subset
"""

import argparse
import collections
import tempfile
import time

from nvstack.harness.experiment import enumerate_crash_points
from nvstack.harness.verify import verify


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ops", type=int, default=20)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variant", choices=["correct", "buggy"], default="correct")
    ap.add_argument("--range", choices=["narrow", "wide"], default="narrow")
    ap.add_argument("--ordering", choices=["in_order_prefix", "random_subset"], default="in_order_prefix")
    ap.add_argument("--max-flush", type=int)
    args = ap.parse_args()

    t = time.perf_counter()
    reasons = collections.Counter()
    points = 0
    with tempfile.TemporaryDirectory() as tmp:
        for k, log in enumerate_crash_points(args.ops, args.max_flush, workdir=tmp, seed=args.seed,
                                             threads=args.threads, variant=args.variant,
                                             value_range=args.range, ordering=args.ordering):
            points += 1
            v = verify(log)
            reasons[v.reason if not v else "serializable"] += 1
            if not v:
                print(f"flush {k}: NOT serializable ({v.reason})")
    print(f"{points} crash points in {time.perf_counter() - t:.1f}s: {dict(reasons)}")
    return 0 if set(reasons) <= {"serializable"} else 1


if __name__ == "__main__":
    raise SystemExit(main())
