#!/usr/bin/env python3
"""Random crash injection against both register variants.

The buggy variant drops the notification matrix; the correct one keeps it.
Both run the same seeds, crash probabilities and preemption stalls, so the
difference in flagged logs comes from the algorithm alone.

    python scripts/bug_hunt.py --runs 100
"""

import argparse
import tempfile
import time
from pathlib import Path

from nvstack.harness.experiment import ExperimentConfig, run_experiment
from nvstack.harness.schedule import overwrite_then_crash
from nvstack.harness.verify import verify


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--ops", type=int, default=300)
    ap.add_argument("--crash-prob", type=float, default=0.003)
    ap.add_argument("--crash-cycles", type=int, default=10)
    ap.add_argument("--preempt", type=float, nargs=2, default=(0.5, 0.005), metavar=("PROB", "SECONDS"))
    ap.add_argument("--no-preempt", action="store_true", help="leave thread switching to the interpreter")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        for variant in ("correct", "buggy"):
            v = verify(overwrite_then_crash(Path(tmp) / f"scripted-{variant}.nvr", variant))
            print(f"scripted overwrite-then-crash, {variant}: {'serializable' if v else 'NOT serializable'}")
        for variant in ("correct", "buggy"):
            t = time.perf_counter()
            flagged = crashes = 0
            for seed in range(args.runs):
                image = Path(tmp) / f"{variant}-{seed}.nvr"
                log = run_experiment(ExperimentConfig(
                    image=image, threads=args.threads, ops=args.ops, seed=seed, crash="inject",
                    crash_prob=args.crash_prob, crash_cycles=args.crash_cycles, variant=variant,
                    preempt=None if args.no_preempt else tuple(args.preempt)))
                flagged += not verify(log)
                crashes += int(log.meta["crashes"])
                image.unlink()
            print(f"{variant:8} {flagged:>4}/{args.runs} non-serializable, {crashes} crashes, "
                  f"{time.perf_counter() - t:.1f}s")


if __name__ == "__main__":
    main()
