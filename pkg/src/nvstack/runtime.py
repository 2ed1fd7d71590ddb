"""Execution engine: function registry, persistent calls, workers, recovery.

Every NVRAM function is registered under an explicit, stable id together with
its recover twin.  ``body(ctx, args) -> int`` runs the function;
``recover(ctx, args, callee_answer) -> int`` completes or rolls it back after a
crash.  ``callee_answer`` is the frame's own answer slot: the result of the
last callee that finished, or ``None``.

A call resets the caller's answer slot, pushes the callee frame, runs the
body, stores the answer in the caller's slot, and pops.  Once the answer is in
the caller's slot the callee is complete, so recovery only pops such a frame.
"""

from __future__ import annotations

import logging
import queue
import random
import struct
import threading
from dataclasses import dataclass
from typing import Callable

from .errors import (
    ConfigError,
    CorruptStackError,
    DispatchError,
    RecoveryError,
    SimulatedCrash,
)
from .pstack import DUMMY_FUNCTION_ID, PersistentStack, init_stack, open_stack
from .region import U32, U64, Region

log = logging.getLogger(__name__)

TASK_WRAPPER_ID = (1 << 64) - 1
TASK_ARGS_MAX = 32
PENDING, DONE = 0, 1

# task_id, function_id, args_len, args, answer_valid, answer, status
TASK_SLOT = struct.Struct(f"<QQI{TASK_ARGS_MAX}sBqB")
TASK_ANSWER_OFF = 20 + TASK_ARGS_MAX
TASK_STATUS_OFF = TASK_ANSWER_OFF + 9
TABLE_HEADER = struct.Struct("<II")  # count, slot size

Body = Callable[["CallContext", bytes], int]
Recover = Callable[["CallContext", bytes, "int | None"], int]


@dataclass(frozen=True)
class FunctionEntry:
    function_id: int
    body: Body
    recover: Recover


class Registry:
    def __init__(self):
        self._entries: dict[int, FunctionEntry] = {}
        self._frozen = False

    def register(self, function_id: int, body: Body, recover: Recover) -> None:
        if self._frozen:
            raise ConfigError("registry is frozen once workers start")
        if function_id == DUMMY_FUNCTION_ID:
            raise ConfigError("function id 0 is reserved for the dummy frame")
        if not 0 < function_id < 1 << 64:
            raise ConfigError(f"function id {function_id} is not a u64")
        if function_id in self._entries:
            raise ConfigError(f"function id {function_id} is already registered")
        self._entries[function_id] = FunctionEntry(function_id, body, recover)

    def __getitem__(self, function_id: int) -> FunctionEntry:
        try:
            return self._entries[function_id]
        except KeyError:
            raise DispatchError(f"no function registered under id {function_id}") from None

    def __contains__(self, function_id: int) -> bool:
        return function_id in self._entries

    def freeze(self) -> None:
        self._frozen = True


@dataclass(frozen=True)
class Task:
    task_id: int
    function_id: int
    args: bytes = b""


@dataclass(frozen=True)
class TaskDescriptor:
    index: int
    task_id: int
    function_id: int
    args: bytes
    answer_valid: bool
    answer: int
    status: int

    @property
    def done(self) -> bool:
        return self.status == DONE


class TaskTable:
    """Persistent table of top-level tasks; one line-aligned slot per task."""

    def __init__(self, region: Region, offset: int):
        self.region = region
        self.offset = offset
        self.count, self.slot_size = region.unpack(TABLE_HEADER, offset)
        self.first = offset + region.line_size

    @classmethod
    def attach(cls, region: Region) -> "TaskTable | None":
        root = region.task_table_root
        return cls(region, root) if root else None

    @classmethod
    def create(cls, region: Region, tasks) -> "TaskTable":
        tasks = list(tasks)
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate task ids")
        if region.task_table_root:
            raise ConfigError("the region already holds a task table")
        for t in tasks:
            if len(t.args) > TASK_ARGS_MAX:
                raise ConfigError(f"task {t.task_id}: {len(t.args)} argument bytes exceeds {TASK_ARGS_MAX}")
        ls = region.line_size
        slot = -(-TASK_SLOT.size // ls) * ls
        offset = region.allocate(ls + slot * max(len(tasks), 1))
        first = offset + ls
        for i, t in enumerate(tasks):
            region.write(first + i * slot, TASK_SLOT.pack(
                t.task_id, t.function_id, len(t.args), bytes(t.args), 0, 0, PENDING))
        if tasks:
            region.flush(first, slot * len(tasks))
        region.write(offset, TABLE_HEADER.pack(len(tasks), slot))
        region.flush(offset, TABLE_HEADER.size)
        region.set_task_table_root(offset)
        return cls(region, offset)

    def __len__(self) -> int:
        return self.count

    def slot(self, index: int) -> int:
        if not 0 <= index < self.count:
            raise IndexError(index)
        return self.first + index * self.slot_size

    def read(self, index: int) -> TaskDescriptor:
        tid, fid, n, args, valid, answer, status = self.region.unpack(TASK_SLOT, self.slot(index))
        return TaskDescriptor(index, tid, fid, args[:n], bool(valid), answer, status)

    def descriptors(self) -> list[TaskDescriptor]:
        return [self.read(i) for i in range(self.count)]

    def pending(self) -> list[int]:
        return [d.index for d in self.descriptors() if not d.done]

    def complete(self, index: int, answer: int) -> None:
        """Record the answer, then flip the status; the answer is durable first."""
        at = self.slot(index)
        region = self.region
        region.write(at + TASK_ANSWER_OFF, struct.pack("<Bq", 1, answer))
        region.flush(at + TASK_ANSWER_OFF, 9)
        region.write(at + TASK_STATUS_OFF, bytes((DONE,)))
        region.flush(at + TASK_STATUS_OFF, 1)


class CallContext:
    """Per-worker handle: the worker's stack plus the runtime it calls into."""

    def __init__(self, runtime: "Runtime", stack: PersistentStack, process_id: int):
        self.runtime = runtime
        self.stack = stack
        self.process_id = process_id

    @property
    def region(self) -> Region:
        return self.runtime.region

    @property
    def depth(self) -> int:
        return self.stack.depth

    def call(self, function_id: int, args: bytes = b"") -> int:
        entry = self.runtime.registry[function_id]
        stack = self.stack
        if stack.depth > 1:
            stack.reset_answer()
        stack.push(function_id, args)
        try:
            answer = entry.body(self, args)
        except Exception:
            # ordinary failures unwind; a SimulatedCrash leaves the frame for recovery
            stack.pop()
            raise
        answer = int(answer or 0)
        self._finish(answer)
        return answer

    def call_big(self, function_id: int, args: bytes, answer_len: int) -> int:
        """Call with a heap-allocated answer buffer; returns its offset."""
        if answer_len <= 0:
            raise ConfigError("answer length must be positive")
        buf = self.region.allocate(answer_len)
        self.call(function_id, U64.pack(buf) + bytes(args))
        return buf

    def _finish(self, answer: int) -> None:
        if self.stack.depth > 2:
            self.stack.write_answer(answer)
        self.stack.pop()


def big_answer_target(args: bytes) -> tuple[int, bytes]:
    """Split ``call_big`` arguments into (answer offset, caller's args)."""
    return U64.unpack_from(args)[0], args[8:]


def store_big_answer(ctx: CallContext, offset: int, data: bytes) -> int:
    """Write and flush a big answer; the returned offset is the stack answer."""
    ctx.region.write(offset, data)
    ctx.region.flush(offset, len(data))
    return offset


def _task_table(ctx: CallContext) -> TaskTable:
    table = ctx.runtime.task_table()
    if table is None:
        raise CorruptStackError("task wrapper frame without a task table")
    return table


def _wrapper_body(ctx: CallContext, args: bytes) -> int:
    index = U32.unpack(args)[0]
    table = _task_table(ctx)
    task = table.read(index)
    if not task.done:
        table.complete(index, ctx.call(task.function_id, task.args))
    return 0


def _wrapper_recover(ctx: CallContext, args: bytes, callee: int | None) -> int:
    index = U32.unpack(args)[0]
    table = _task_table(ctx)
    task = table.read(index)
    if task.done:
        return 0
    if task.answer_valid:
        answer = task.answer
    elif callee is not None:
        answer = callee
    else:
        # the task function never linearized: run it now
        answer = ctx.call(task.function_id, task.args)
    table.complete(index, answer)
    return 0


def bounded_stacks(capacity: int = 4096):
    return lambda region: init_stack(region, capacity)


class Runtime:
    """Main-thread orchestration of one region.

    ``stack_factory(region)`` creates a new worker stack when the region has
    fewer stacks than requested workers.
    """

    def __init__(self, region: Region, registry: Registry, *, stack_factory=None):
        self.region = region
        self.registry = registry
        self.stack_factory = stack_factory or bounded_stacks()
        if TASK_WRAPPER_ID not in registry:
            registry.register(TASK_WRAPPER_ID, _wrapper_body, _wrapper_recover)
        self._table = None

    def task_table(self) -> TaskTable | None:
        if self._table is None:
            self._table = TaskTable.attach(self.region)
        return self._table

    def register_tasks(self, tasks) -> TaskTable:
        self._table = TaskTable.create(self.region, tasks)
        return self._table

    def stacks(self) -> list[PersistentStack]:
        return [open_stack(self.region, i) for i in range(self.region.stack_count())]

    def ensure_stacks(self, n: int) -> list[PersistentStack]:
        stacks = [open_stack(self.region, i) for i in range(min(n, self.region.stack_count()))]
        while len(stacks) < n:
            stacks.append(self.stack_factory(self.region))
        return stacks

    def context(self, index: int, stack: PersistentStack | None = None) -> CallContext:
        return CallContext(self, stack or open_stack(self.region, index), index + 1)

    # -- normal mode ------------------------------------------------------

    def run_normal(self, n_workers: int, tasks=None, *, seed: int | None = None) -> TaskTable:
        """Run every PENDING task on ``n_workers`` threads until the queue drains."""
        table = self.task_table()
        if tasks is not None:
            tasks = list(tasks)
            if table is None:
                table = self.register_tasks(tasks)
            elif sorted(t.task_id for t in tasks) != sorted(d.task_id for d in table.descriptors()):
                raise ConfigError("region already holds a different task table")
        if table is None:
            raise ConfigError("no tasks registered")
        if n_workers <= 0:
            return table
        self.registry.freeze()
        stacks = self.ensure_stacks(n_workers)
        for i, s in enumerate(stacks):
            if s.depth > 1:
                raise ConfigError(f"stack {i} holds {s.depth - 1} live frames; run recovery first")
        order = table.pending()
        if seed is not None:
            random.Random(seed).shuffle(order)
        work = queue.SimpleQueue()
        for index in order:
            work.put(index)

        def worker(ctx):
            while True:
                try:
                    index = work.get_nowait()
                except queue.Empty:
                    return
                ctx.call(TASK_WRAPPER_ID, U32.pack(index))

        _run_threads([(f"worker-{i}", worker, self.context(i, s)) for i, s in enumerate(stacks)])
        return table

    # -- recovery mode ----------------------------------------------------

    def recover_stack(self, ctx: CallContext) -> int:
        """Run recover functions top-down until only the dummy frame is left."""
        stack = ctx.stack
        runs = 0
        while stack.depth > 1:
            top = stack.top()
            if stack.depth > 2 and stack.frame(-2).answer_valid:
                # the answer reached the caller: the call finished, only the pop is missing
                stack.pop()
                continue
            entry = self.registry[top.function_id]
            answer = entry.recover(ctx, top.args, top.callee_answer)
            runs += 1
            ctx._finish(int(answer or 0))
        return runs

    def recover_all(self) -> int:
        """Recover every registered stack in parallel; returns recover invocations."""
        self.registry.freeze()
        n = self.region.stack_count()
        runs = [0] * n
        failures = {}

        def recoverer(i):
            try:
                runs[i] = self.recover_stack(self.context(i))
            except (CorruptStackError, DispatchError) as exc:
                log.error("recovery of stack %d aborted: %s", i, exc)
                failures[i] = exc

        _run_threads([(f"recover-{i}", recoverer, i) for i in range(n)])
        if failures:
            raise RecoveryError(failures)
        return sum(runs)


def _run_threads(jobs) -> None:
    """Run ``(name, fn, arg)`` jobs on threads; re-raise the first crash or error."""
    errors = []

    def guard(fn, arg):
        try:
            fn(arg)
        except BaseException as exc:  # noqa: BLE001 - crashes must reach the main thread
            errors.append(exc)

    if len(jobs) == 1:
        _, fn, arg = jobs[0]
        guard(fn, arg)
    else:
        threads = [threading.Thread(target=guard, args=(fn, arg), name=name) for name, fn, arg in jobs]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    for exc in errors:
        if isinstance(exc, SimulatedCrash):
            raise exc
    if errors:
        raise errors[0]

