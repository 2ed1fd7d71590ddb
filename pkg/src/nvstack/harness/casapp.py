"""The CAS experiment as NVRAM functions.

Each task runs ``cas_task(old, new, tag)``, which calls
``rcas(p, old, new, tag)`` one level down, so every operation exercises a
nested call.  ``p`` is the worker's process id.  The tag is the op id plus one
and uniquely names the instance the CAS would install.  The task answer packs
the outcome bit with the process id: ``ok | p << 8``.
"""

from __future__ import annotations

import struct

from ..rcas import RcasRegister, rcas_cas, rcas_cas_buggy, rcas_recover, rcas_recover_buggy
from ..runtime import Registry, Task

RCAS_ID = 0x10
CAS_TASK_ID = 0x11

TASK_ARGS = struct.Struct("<iiI")  # old, new, tag
RCAS_ARGS = struct.Struct("<BiiI")  # p, old, new, tag


def _register(ctx) -> RcasRegister:
    return RcasRegister.attach(ctx.region)


def _rcas_body(ctx, args):
    reg = _register(ctx)
    fn = rcas_cas if reg.variant == "correct" else rcas_cas_buggy
    return int(fn(reg, *RCAS_ARGS.unpack(args)))


def _hooked(body, after):
    def run(ctx, args):
        ok = body(ctx, args)
        after(ctx, ok)
        return ok
    return run


def _rcas_recover(ctx, args, callee):
    reg = _register(ctx)
    fn = rcas_recover if reg.variant == "correct" else rcas_recover_buggy
    return int(fn(reg, *RCAS_ARGS.unpack(args)))


def _task_body(ctx, args):
    old, new, tag = TASK_ARGS.unpack(args)
    ok = ctx.call(RCAS_ID, RCAS_ARGS.pack(ctx.process_id, old, new, tag))
    return ok | ctx.process_id << 8


def _task_recover(ctx, args, callee):
    if callee is not None:
        return callee | ctx.process_id << 8
    # the nested CAS never started
    return _task_body(ctx, args)


def cas_registry(after_cas=None) -> Registry:
    """``after_cas(ctx, ok)``, if given, runs once the CAS returned but before its answer is stored."""
    registry = Registry()
    body = _rcas_body if after_cas is None else _hooked(_rcas_body, after_cas)
    registry.register(RCAS_ID, body, _rcas_recover)
    registry.register(CAS_TASK_ID, _task_body, _task_recover)
    return registry


def cas_tasks(ops) -> list[Task]:
    return [Task(op.op_id, CAS_TASK_ID, TASK_ARGS.pack(op.old, op.new, op.op_id + 1)) for op in ops]


def decode_answer(answer: int) -> tuple[bool, int]:
    """(succeeded, process id) from a task answer."""
    return bool(answer & 1), answer >> 8
