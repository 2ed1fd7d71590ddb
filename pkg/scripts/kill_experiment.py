#!/usr/bin/env python3
"""Kill-based crash experiment: N workers, K CAS ops, SIGKILL restarts, then verify.

    python scripts/kill_experiment.py --seeds 20 --ranges narrow wide
"""

import argparse
import tempfile
import time
from pathlib import Path

from nvstack.harness.experiment import ExperimentConfig, run_experiment
from nvstack.harness.verify import verify


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--ops", type=int, default=1000)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--ranges", nargs="+", default=["narrow", "wide"], choices=["narrow", "wide"])
    ap.add_argument("--min-crashes", type=int, default=10)
    ap.add_argument("--variant", choices=["correct", "buggy"], default="correct")
    args = ap.parse_args()

    failures = 0
    print(f"{'range':7} {'seed':>4} {'crashes':>7} {'ok':>5} {'fail':>5} {'final':>7} {'secs':>6}  verdict")
    with tempfile.TemporaryDirectory() as tmp:
        for value_range in args.ranges:
            for seed in range(args.seeds):
                image = Path(tmp) / f"{value_range}-{seed}.nvr"
                t = time.perf_counter()
                log = run_experiment(ExperimentConfig(
                    image=image, threads=args.threads, ops=args.ops, value_range=value_range, seed=seed,
                    crash="kill", min_crashes=args.min_crashes, variant=args.variant))
                v = verify(log)
                failures += not v
                print(f"{value_range:7} {seed:>4} {log.meta['crashes']:>7} {len(log.successes()):>5} "
                      f"{len(log.failures()):>5} {log.final:>7} {time.perf_counter() - t:>6.1f}  "
                      f"{'serializable' if v else 'NOT serializable (' + v.reason + ')'}")
                image.unlink()
    total = args.seeds * len(args.ranges)
    print(f"{total - failures}/{total} serializable")
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
