"""Crash/restart cycles for the CAS experiment.

A run prepares an image (register, task table), then cycles through
recovery mode and normal mode until every task is DONE, crashing along the
way.  ``inject`` crashes deterministically inside the process through a
simulated cache.  ``kill`` runs each cycle in a child process on the bare file
mapping and SIGKILLs it after a random delay, as an external ``kill`` would.
"""

from __future__ import annotations

import logging
import os
import random
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import NVRamError, SimulatedCrash
from ..rcas import rcas_init, rcas_read, RcasRegister
from ..region import CrashPlan, open_region, round_up
from ..runtime import Runtime, TaskTable, bounded_stacks
from .casapp import cas_registry, cas_tasks, decode_answer
from .workload import CasOp, ExecutionLog, generate_workload

log = logging.getLogger(__name__)

READY = "ready"


class ExperimentError(NVRamError):
    pass


@dataclass
class ExperimentConfig:
    image: Path
    threads: int = 4
    ops: int = 1000
    value_range: str = "narrow"
    seed: int = 0
    crash: str = "none"  # none | kill | inject
    at_flush: list[int] = field(default_factory=list)  # inject: one crash index per cycle
    crash_prob: float | None = None  # inject: per-flush crash probability
    crash_cycles: int = 5  # inject with crash_prob: cycles that may crash
    ordering: str = "in_order_prefix"
    variant: str = "correct"
    min_crashes: int = 10  # kill
    stack_capacity: int = 4096
    line_size: int = 64
    switch_interval: float | None = None
    preempt: tuple[float, float] | None = None  # (probability, max seconds) of a stall after a flush
    max_cycles: int = 10_000

    def region_size(self) -> int:
        ls = self.line_size
        n = self.threads
        size = 64 * 1024 + (self.ops + 2) * 2 * ls + n * (self.stack_capacity + 4 * ls) + (n * n + 4) * ls
        return round_up(size, 4096)


def prepare_image(config: ExperimentConfig, cache_mode: str = "direct") -> tuple[int, list[CasOp]]:
    init, ops = generate_workload(config.seed, config.ops, config.value_range)
    with open_region(config.image, config.region_size(), "create", cache_mode, config.line_size) as region:
        rcas_init(region, init, config.threads, config.variant)
        TaskTable.create(region, cas_tasks(ops))
    return init, ops


def collect_log(image, init: int, ops: list[CasOp]) -> ExecutionLog:
    """Read task answers and the final register value from a quiescent image."""
    with open_region(image, cache_mode="direct") as region:
        table = TaskTable.attach(region)
        by_id = {d.task_id: d for d in table.descriptors()}
        out = []
        for op in ops:
            d = by_id[op.op_id]
            if d.done:
                ok, thread = decode_answer(d.answer)
                out.append(CasOp(op.op_id, thread, op.old, op.new, ok))
            else:
                out.append(CasOp(op.op_id, 0, op.old, op.new, None))
        final = rcas_read(RcasRegister.attach(region))
    return ExecutionLog(init, out, final)


def _inject_plan(config: ExperimentConfig, cycle: int) -> CrashPlan:
    if config.crash != "inject":
        return CrashPlan.none()
    if config.at_flush:
        if cycle < len(config.at_flush):
            return CrashPlan.at(config.at_flush[cycle], config.ordering, seed=config.seed + cycle)
        return CrashPlan.none()
    if config.crash_prob and cycle < config.crash_cycles:
        return CrashPlan.random(config.seed * 7919 + cycle, config.crash_prob, config.ordering)
    return CrashPlan.none()


def run_cycle(image, threads: int, *, plan: CrashPlan | None = None, cache_mode: str = "simulated",
              seed: int | None = None, stack_capacity: int = 4096, preempt=None) -> dict:
    """One restart: recovery mode, then normal mode.  Returns cycle statistics."""
    stats = {"crashed": False, "recovered": 0, "flushes": 0}
    region = open_region(image, cache_mode=cache_mode, plan=plan)
    region.preempt = preempt
    try:
        rt = Runtime(region, cas_registry(), stack_factory=bounded_stacks(stack_capacity))
        stats["recovered"] = rt.recover_all()
        for i, stack in enumerate(rt.stacks()):
            if stack.depth != 1:
                raise ExperimentError(f"stack {i} still holds {stack.depth} frames after recovery")
        rt.run_normal(threads, seed=seed)
    except SimulatedCrash:
        stats["crashed"] = True
        if cache_mode == "simulated":
            region.crash()
    finally:
        stats["flushes"] = region.flush_counter
        region.close()
    return stats


def _pending(image) -> int:
    with open_region(image, cache_mode="direct") as region:
        return len(TaskTable.attach(region).pending())


def run_experiment(config: ExperimentConfig) -> ExecutionLog:
    if config.crash not in ("none", "inject", "kill"):
        raise ExperimentError(f"unknown crash mode {config.crash!r}")
    cache_mode = "direct" if config.crash == "kill" else "simulated"
    init, ops = prepare_image(config, cache_mode)
    old_interval = sys.getswitchinterval()
    if config.switch_interval:
        sys.setswitchinterval(config.switch_interval)
    try:
        if config.crash == "kill":
            meta = _kill_cycles(config)
        else:
            meta = _inject_cycles(config)
    finally:
        sys.setswitchinterval(old_interval)
    result = collect_log(config.image, init, ops)
    result.check_complete()
    result.meta.update(meta)
    result.meta.update(seed=config.seed, threads=config.threads, variant=config.variant,
                       range=config.value_range, crash=config.crash)
    return result


def _inject_cycles(config: ExperimentConfig) -> dict:
    crashes = recovered = 0
    for cycle in range(config.max_cycles):
        stats = run_cycle(config.image, config.threads, plan=_inject_plan(config, cycle),
                          seed=config.seed + cycle, stack_capacity=config.stack_capacity,
                          preempt=config.preempt)
        recovered += stats["recovered"]
        if stats["crashed"]:
            crashes += 1
            continue
        if _pending(config.image) == 0:
            return {"crashes": crashes, "cycles": cycle + 1, "recovered": recovered}
    raise ExperimentError(f"tasks still pending after {config.max_cycles} cycles")


def _worker_command(config: ExperimentConfig, cycle: int) -> list[str]:
    cmd = [sys.executable, "-m", "nvstack.harness", "_worker", "--image", str(config.image),
           "--threads", str(config.threads), "--seed", str(config.seed + cycle),
           "--stack-capacity", str(config.stack_capacity)]
    if config.switch_interval:
        cmd += ["--switch-interval", str(config.switch_interval)]
    return cmd


def _kill_cycles(config: ExperimentConfig) -> dict:
    rng = random.Random(config.seed)
    rate = 1000.0  # ops per second, refined after every cycle
    crashes = 0
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[2])
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    for cycle in range(config.max_cycles):
        before = _pending(config.image)
        if before == 0:
            return {"crashes": crashes, "cycles": cycle}
        proc = subprocess.Popen(_worker_command(config, cycle), stdout=subprocess.PIPE,
                                stderr=subprocess.PIPE, text=True, env=env)
        if proc.stdout.readline().strip() != READY:
            proc.wait()
            raise ExperimentError(f"worker failed to start: {proc.stderr.read()}")
        start = time.monotonic()
        killed = False
        if crashes < config.min_crashes:
            # spread the remaining kills over the expected remaining run time
            expected = before / rate
            delay = rng.uniform(0, expected / (config.min_crashes - crashes + 1))
            try:
                proc.wait(timeout=delay)
            except subprocess.TimeoutExpired:
                proc.kill()
                killed = True
        proc.wait()
        elapsed = time.monotonic() - start
        stderr = proc.stderr.read()
        proc.stdout.close()
        proc.stderr.close()
        if killed:
            crashes += 1
        elif proc.returncode != 0:
            raise ExperimentError(f"worker exited with {proc.returncode}: {stderr}")
        progress = before - _pending(config.image)
        if progress > 0 and elapsed > 0.01:
            rate = 0.5 * rate + 0.5 * progress / elapsed
        log.debug("cycle %d: killed=%s progress=%d elapsed=%.3f", cycle, killed, progress, elapsed)
    raise ExperimentError(f"tasks still pending after {config.max_cycles} cycles")


def worker_main(image, threads: int, seed: int, stack_capacity: int = 4096,
                switch_interval: float | None = None) -> int:
    """Child-process side of kill mode: recover, then work until the queue drains."""
    if switch_interval:
        sys.setswitchinterval(switch_interval)
    region = open_region(image, cache_mode="direct", plan=CrashPlan(mode="kill"))
    try:
        rt = Runtime(region, cas_registry(), stack_factory=bounded_stacks(stack_capacity))
        print(READY, flush=True)
        rt.recover_all()
        rt.run_normal(threads, seed=seed)
    finally:
        region.close()
    return 0


def enumerate_crash_points(ops: int = 20, max_flush: int | None = None, *, workdir, seed: int = 0,
                           threads: int = 1, variant: str = "correct", value_range: str = "narrow",
                           ordering: str = "in_order_prefix"):
    """Crash once at every flush index in turn.

    Yields ``(k, log)`` for each index that crashed; stops at the first index
    the run completes without reaching, or after ``max_flush``.
    """
    workdir = Path(workdir)
    k = 0
    while max_flush is None or k <= max_flush:
        image = workdir / f"crash-{k}.img"
        config = ExperimentConfig(image=image, threads=threads, ops=ops, value_range=value_range,
                                  seed=seed, crash="inject", at_flush=[k], variant=variant,
                                  ordering=ordering)
        result = run_experiment(config)
        image.unlink()
        if not int(result.meta["crashes"]):
            return
        yield k, result
        k += 1
