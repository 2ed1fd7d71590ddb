"""Command line: ``run``, ``recover``, ``verify``, ``enumerate``, ``scripted``.

Exit status: 0 pass / serializable, 1 fail / non-serializable, 2 error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

from ..errors import NVRamError
from ..region import open_region
from ..runtime import Runtime
from .casapp import cas_registry
from .experiment import ExperimentConfig, enumerate_crash_points, run_experiment, worker_main
from .schedule import overwrite_then_crash
from .verify import oracle_verify, verify
from .workload import ExecutionLog

PASS, FAIL, ERROR = 0, 1, 2


def _report(log: ExecutionLog, oracle: bool = False) -> int:
    verdict = verify(log)
    print(f"serializable: {verdict.serializable} (reason: {verdict.reason}); "
          f"{len(log.successes())} successful, {len(log.failures())} failed, final {log.final}")
    if oracle:
        agree = oracle_verify(log)
        print(f"oracle: {agree}")
        if agree != verdict.serializable:
            print("verifier and oracle disagree", file=sys.stderr)
            return ERROR
    return PASS if verdict.serializable else FAIL


def cmd_run(args) -> int:
    image = Path(args.image)
    if image.exists():
        if not args.force:
            print(f"{image} exists; pass --force to replace it", file=sys.stderr)
            return ERROR
        image.unlink()
    config = ExperimentConfig(
        image=image, threads=args.threads, ops=args.ops, value_range=args.range, seed=args.seed,
        crash=args.crash, at_flush=args.at_flush or [], crash_prob=args.crash_prob,
        variant=args.variant, min_crashes=args.min_crashes, switch_interval=args.switch_interval,
        crash_cycles=args.crash_cycles, preempt=tuple(args.preempt) if args.preempt else None,
    )
    log = run_experiment(config)
    if args.log:
        log.write(args.log)
    print(f"crashes: {log.meta.get('crashes', 0)}, cycles: {log.meta.get('cycles', 1)}")
    return _report(log)


def cmd_recover(args) -> int:
    with open_region(args.image, cache_mode="direct") as region:
        runs = Runtime(region, cas_registry()).recover_all()
    print(f"recover invocations: {runs}")
    return PASS


def cmd_verify(args) -> int:
    return _report(ExecutionLog.read(args.log), oracle=args.oracle)


def cmd_enumerate(args) -> int:
    bad = points = 0
    with tempfile.TemporaryDirectory() as tmp:
        for k, log in enumerate_crash_points(args.ops, args.max_flush, workdir=tmp, seed=args.seed,
                                             threads=args.threads, variant=args.variant):
            points += 1
            verdict = verify(log)
            if not verdict.serializable:
                bad += 1
                print(f"crash at flush {k}: NOT serializable ({verdict.reason})")
    print(f"{points} crash points, {bad} non-serializable")
    return PASS if bad == 0 else FAIL


def cmd_scripted(args) -> int:
    with tempfile.TemporaryDirectory() as tmp:
        log = overwrite_then_crash(Path(tmp) / "scripted.img", args.variant)
    if args.log:
        log.write(args.log)
    print(log.dumps(), end="")
    return _report(log)


def cmd_worker(args) -> int:
    return worker_main(args.image, args.threads, args.seed, args.stack_capacity, args.switch_interval)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvstack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the CAS experiment and verify its log")
    run.add_argument("--image", required=True)
    run.add_argument("--threads", type=int, default=4)
    run.add_argument("--ops", type=int, default=1000)
    run.add_argument("--range", choices=("narrow", "wide"), default="narrow")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--crash", choices=("none", "kill", "inject"), default="none")
    crash = run.add_mutually_exclusive_group()
    crash.add_argument("--at-flush", type=int, action="append",
                       help="inject: crash before this line flush (repeat for later cycles)")
    crash.add_argument("--crash-prob", type=float, help="inject: crash probability per line flush")
    run.add_argument("--crash-cycles", type=int, default=5, help="inject: restarts that may crash")
    run.add_argument("--preempt", type=float, nargs=2, metavar=("PROB", "SECONDS"),
                     help="inject: stall a thread after flushing the shared register, as preemption would")
    run.add_argument("--variant", choices=("correct", "buggy"), default="correct")
    run.add_argument("--min-crashes", type=int, default=10, help="kill: crashes before letting a cycle finish")
    run.add_argument("--switch-interval", type=float)
    run.add_argument("--log")
    run.add_argument("--force", action="store_true", help="replace an existing image")
    run.set_defaults(func=cmd_run)

    rec = sub.add_parser("recover", help="run recovery on an image")
    rec.add_argument("--image", required=True)
    rec.set_defaults(func=cmd_recover)

    ver = sub.add_parser("verify", help="check a log for serializability")
    ver.add_argument("--log", required=True)
    ver.add_argument("--oracle", action="store_true", help="cross-check with brute force (<= 8 successes)")
    ver.set_defaults(func=cmd_verify)

    enum = sub.add_parser("enumerate", help="crash at every flush index of a small run")
    enum.add_argument("--ops", type=int, default=20)
    enum.add_argument("--max-flush", type=int)
    enum.add_argument("--threads", type=int, default=1)
    enum.add_argument("--seed", type=int, default=0)
    enum.add_argument("--variant", choices=("correct", "buggy"), default="correct")
    enum.set_defaults(func=cmd_enumerate)

    scripted = sub.add_parser("scripted", help="overwrite-then-crash schedule on two workers")
    scripted.add_argument("--variant", choices=("correct", "buggy"), default="correct")
    scripted.add_argument("--log")
    scripted.set_defaults(func=cmd_scripted)

    worker = sub.add_parser("_worker")
    worker.add_argument("--image", required=True)
    worker.add_argument("--threads", type=int, required=True)
    worker.add_argument("--seed", type=int, default=0)
    worker.add_argument("--stack-capacity", type=int, default=4096)
    worker.add_argument("--switch-interval", type=float)
    worker.set_defaults(func=cmd_worker)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NVRamError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR


if __name__ == "__main__":
    sys.exit(main())
