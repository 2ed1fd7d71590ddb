"""Scripted overwrite-then-crash schedule.

Worker 1 runs ``CAS(0, 1)`` and stops right after its CAS took effect,
before the answer reaches its caller's frame.  Worker 2 then runs
``CAS(1, 0)`` to completion, overwriting worker 1's value, and the machine
crashes.  Recovery has to decide whether worker 1's CAS happened: the
notification matrix answers that, the word alone cannot, because it now holds
worker 2's value.  Without the matrix the CAS runs again and succeeds a second
time, so the register ends at 1 and the log is not serializable.
"""

from __future__ import annotations

import threading

from ..errors import SimulatedCrash
from ..rcas import rcas_init
from ..region import U32, open_region
from ..runtime import TASK_WRAPPER_ID, Runtime, TaskTable
from .casapp import cas_registry, cas_tasks
from .experiment import collect_log
from .workload import CasOp, ExecutionLog

INIT = 0
OPS = [CasOp(0, 0, 0, 1), CasOp(1, 0, 1, 0)]
REGION_SIZE = 64 * 1024


def overwrite_then_crash(image, variant: str = "correct", timeout: float = 10.0) -> ExecutionLog:
    with open_region(image, REGION_SIZE, "create", "simulated") as region:
        rcas_init(region, INIT, 2, variant)
        TaskTable.create(region, cas_tasks(OPS))

    cas_done = threading.Event()
    release = threading.Event()
    outcome = {}

    def pause_first(ctx, ok):
        if ctx.process_id == 1:
            outcome["first_cas"] = ok
            cas_done.set()
            release.wait(timeout)

    region = open_region(image, cache_mode="simulated")
    try:
        rt = Runtime(region, cas_registry(after_cas=pause_first))
        first, second = (rt.context(i, s) for i, s in enumerate(rt.ensure_stacks(2)))

        def run_first():
            try:
                first.call(TASK_WRAPPER_ID, U32.pack(0))
            except SimulatedCrash:
                outcome["first_crashed"] = True

        t = threading.Thread(target=run_first, name="worker-1")
        t.start()
        if not cas_done.wait(timeout):
            raise RuntimeError("worker 1 never reached its CAS")
        second.call(TASK_WRAPPER_ID, U32.pack(1))
        region.crash()
        release.set()
        t.join(timeout)
    finally:
        release.set()
        region.close()
    if not (outcome.get("first_cas") and outcome.get("first_crashed")):
        raise RuntimeError(f"schedule did not unfold as scripted: {outcome}")

    # restart: recover both stacks, then drain whatever is still pending
    with open_region(image, cache_mode="simulated") as region:
        rt = Runtime(region, cas_registry())
        rt.recover_all()
        rt.run_normal(2)
    log = collect_log(image, INIT, OPS)
    log.meta.update(variant=variant, schedule="overwrite-then-crash")
    return log
