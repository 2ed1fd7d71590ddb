"""Emulated NVRAM: a memory-mapped file with explicit cache-line flushes.

Two cache modes are supported.  In ``direct`` mode writes land in the
mapping immediately and a flush ``msync``s the page holding each line; this is
what the kill-based experiment runs on.  In ``simulated`` mode writes land in a
volatile copy of the image and only reach the file when their line is flushed,
which makes crashes deterministic: a :class:`CrashPlan` decides, between two
line flushes, whether the machine dies.

Every persistent cross-reference is an offset from the start of the region.
"""

from __future__ import annotations

import mmap
import os
import random
import struct
import threading
import time
from dataclasses import dataclass

from .errors import (
    BoundsError,
    ConfigError,
    CorruptImageError,
    OutOfMemoryError,
    SimulatedCrash,
)

MAGIC = b"NVRG"
VERSION = 1
HEADER = struct.Struct("<4sHHQQ")

ROOT_DIR_OFFSET = 64
MAX_STACKS = 32
NUM_SIZE_CLASSES = 20

# root directory layout, absolute offsets
N_STACKS_OFF = ROOT_DIR_OFFSET
STACK_ROOTS_OFF = N_STACKS_OFF + 8
HEAP_HEAD_OFF = STACK_ROOTS_OFF + 8 * MAX_STACKS
RCAS_ROOT_OFF = HEAP_HEAD_OFF + 8
TASK_TABLE_ROOT_OFF = RCAS_ROOT_OFF + 8
FREE_HEADS_OFF = TASK_TABLE_ROOT_OFF + 8
ROOT_DIR_END = FREE_HEADS_OFF + 8 * NUM_SIZE_CLASSES

U8 = struct.Struct("<B")
U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")

CACHE_MODES = ("direct", "simulated")


def round_up(n: int, align: int) -> int:
    return (n + align - 1) // align * align


@dataclass(frozen=True)
class CrashPlan:
    """When, if ever, an injected crash fires.

    ``at_flush`` with ``k`` crashes once ``k`` line flushes have completed,
    immediately before the next one starts.  ``random`` crashes before any line
    flush with the given probability.  ``ordering`` picks which lines of an
    interrupted multi-line flush survive: an in-order prefix, or (with
    ``random_subset``) whatever a seeded shuffle of the flush order leaves.
    ``kill`` never fires in-process; an external supervisor kills the process.
    """

    mode: str = "none"
    at_flush: int = 0
    probability: float = 0.0
    seed: int = 0
    ordering: str = "in_order_prefix"

    def __post_init__(self):
        if self.mode not in ("none", "kill", "at_flush", "random"):
            raise ConfigError(f"unknown crash mode {self.mode!r}")
        if self.ordering not in ("in_order_prefix", "random_subset"):
            raise ConfigError(f"unknown flush ordering {self.ordering!r}")
        if self.mode == "at_flush" and self.at_flush < 0:
            raise ConfigError("at_flush index must be >= 0")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("crash probability must be within [0, 1]")

    @classmethod
    def none(cls) -> "CrashPlan":
        return cls()

    @classmethod
    def at(cls, k: int, ordering: str = "in_order_prefix", seed: int = 0) -> "CrashPlan":
        return cls(mode="at_flush", at_flush=k, ordering=ordering, seed=seed)

    @classmethod
    def random(cls, seed: int, probability: float, ordering: str = "in_order_prefix") -> "CrashPlan":
        return cls(mode="random", seed=seed, probability=probability, ordering=ordering)


class Region:
    """A mapped NVRAM image.  Build one with :func:`open_region`."""

    def __init__(self, path, fh, mm, size, line_size, cache_mode, plan):
        self.path = path
        self.size = size
        self.line_size = line_size
        self.cache_mode = cache_mode
        self.plan = plan or CrashPlan()  # also seeds the plan's random streams
        self.flush_counter = 0
        self.crashed = False
        self.trace = None  # set to a list to record ("write"|"flush", offset, length)
        # (probability, max seconds): after flushing a shared line, stall the
        # flushing thread so others run ahead, as preemption would.  None keeps
        # the GIL's own schedule.
        self.preempt = None
        self.shared_lines: set[int] = set()
        self._fh = fh
        self._mm = mm
        self._lock = threading.Lock()
        self._atomic_lock = threading.Lock()
        self._alloc_lock = threading.RLock()
        if cache_mode == "simulated":
            self._view = bytearray(mm[:])
            self._dirty = set()
        else:
            self._view = mm
            self._dirty = None

    # -- raw access -------------------------------------------------------

    @property
    def plan(self) -> CrashPlan:
        return self._plan

    @plan.setter
    def plan(self, plan: CrashPlan) -> None:
        self._plan = plan
        self._rng = random.Random(plan.seed)
        self._preempt_rng = random.Random(plan.seed + 1)

    @property
    def map_base(self) -> int:
        """Process-local address of the mapping; never stored persistently."""
        import ctypes

        buf = (ctypes.c_char * 1).from_buffer(self._mm)
        addr = ctypes.addressof(buf)
        del buf
        return addr

    def _check(self, offset, n):
        if offset < 0 or n < 0 or offset + n > self.size:
            raise BoundsError(f"range [{offset}, {offset + n}) outside region of {self.size} bytes")

    def read(self, offset: int, n: int) -> bytes:
        self._check(offset, n)
        return bytes(self._view[offset:offset + n])

    def write(self, offset: int, data: bytes) -> None:
        n = len(data)
        self._check(offset, n)
        if self.crashed:
            raise SimulatedCrash("write after crash")
        self._view[offset:offset + n] = data
        if self._dirty is not None and n:
            ls = self.line_size
            self._dirty.update(range(offset // ls, (offset + n - 1) // ls + 1))
        if self.trace is not None:
            self.trace.append(("write", offset, n))

    def unpack(self, fmt: struct.Struct, offset: int):
        self._check(offset, fmt.size)
        return fmt.unpack_from(self._view, offset)

    def pack(self, fmt: struct.Struct, offset: int, *values) -> None:
        self.write(offset, fmt.pack(*values))

    def read_u64(self, offset: int) -> int:
        return self.unpack(U64, offset)[0]

    def write_u64(self, offset: int, value: int) -> None:
        self.write(offset, U64.pack(value))

    def persist_u64(self, offset: int, value: int) -> None:
        self.write(offset, U64.pack(value))
        self.flush(offset, 8)

    def read_image(self, offset: int = 0, n: int | None = None) -> bytes:
        """Bytes as they sit in the persistent image, ignoring the cache."""
        if n is None:
            n = self.size - offset
        self._check(offset, n)
        return bytes(self._mm[offset:offset + n])

    # -- atomic word ------------------------------------------------------

    def load_u64(self, offset: int) -> int:
        with self._atomic_lock:
            return U64.unpack_from(self._view, offset)[0]

    def cas_u64(self, offset: int, expected: int, new: int) -> bool:
        """Compare-and-swap on an aligned 8-byte word in the cache."""
        if offset % 8:
            raise BoundsError("atomic word must be 8-byte aligned")
        with self._atomic_lock:
            if U64.unpack_from(self._view, offset)[0] != expected:
                return False
            self.write(offset, U64.pack(new))
            return True

    # -- flush and crash --------------------------------------------------

    def lines(self, offset: int, n: int) -> range:
        ls = self.line_size
        return range(offset // ls, (offset + max(n, 1) - 1) // ls + 1)

    def flush(self, offset: int, n: int) -> None:
        self._check(offset, n)
        order = list(self.lines(offset, n))
        with self._lock:
            if self.plan.ordering == "random_subset" and len(order) > 1:
                self._rng.shuffle(order)
            for line in order:
                self._consult_plan()
                self._flush_line(line)
                self.flush_counter += 1
            if self.trace is not None:
                self.trace.append(("flush", offset, n))
        if self.preempt is not None and self.shared_lines.intersection(order):
            prob, delay = self.preempt
            if self._preempt_rng.random() < prob:
                time.sleep(delay * self._preempt_rng.random())

    def mark_shared(self, offset: int, n: int) -> None:
        """Flag lines that several threads touch: the only places preemption matters."""
        self.shared_lines.update(self.lines(offset, n))

    def _consult_plan(self):
        if self.crashed:
            raise SimulatedCrash("flush after crash")
        plan = self.plan
        fire = (plan.mode == "at_flush" and self.flush_counter == plan.at_flush) or (
            plan.mode == "random" and self._rng.random() < plan.probability
        )
        if fire:
            self.crashed = True
            raise SimulatedCrash(f"injected crash before line flush #{self.flush_counter + 1}")

    def _flush_line(self, line):
        ls = self.line_size
        start = line * ls
        if self._dirty is not None:
            if line in self._dirty:
                self._mm[start:start + ls] = self._view[start:start + ls]
                self._dirty.discard(line)
        else:
            page = start - start % mmap.PAGESIZE
            self._mm.flush(page, min(mmap.PAGESIZE, self.size - page))

    def crash(self) -> None:
        """Lose the volatile cache.  Only the image survives."""
        if self.cache_mode != "simulated":
            raise ConfigError("crash() needs simulated cache mode")
        self.crashed = True
        self._view = bytearray(self._mm[:])
        self._dirty = set()

    def close(self) -> None:
        """Unmap.  Unflushed simulated-cache lines are dropped, as on power loss."""
        if self._mm is None:
            return
        self._view = None
        self._mm.close()
        self._fh.close()
        self._mm = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- root directory ---------------------------------------------------

    def stack_count(self) -> int:
        return self.unpack(U32, N_STACKS_OFF)[0]

    def stack_root(self, index: int) -> int:
        return self.read_u64(STACK_ROOTS_OFF + 8 * index)

    def register_stack(self, root: int) -> int:
        with self._alloc_lock:
            index = self.stack_count()
            if index >= MAX_STACKS:
                raise OutOfMemoryError(f"root directory holds at most {MAX_STACKS} stacks")
            self.persist_u64(STACK_ROOTS_OFF + 8 * index, root)
            # the count is the commit point
            self.pack(U32, N_STACKS_OFF, index + 1)
            self.flush(N_STACKS_OFF, 4)
            return index

    @property
    def heap_head(self) -> int:
        return self.read_u64(HEAP_HEAD_OFF)

    @property
    def rcas_root(self) -> int:
        return self.read_u64(RCAS_ROOT_OFF)

    def set_rcas_root(self, offset: int) -> None:
        self.persist_u64(RCAS_ROOT_OFF, offset)

    @property
    def task_table_root(self) -> int:
        return self.read_u64(TASK_TABLE_ROOT_OFF)

    def set_task_table_root(self, offset: int) -> None:
        self.persist_u64(TASK_TABLE_ROOT_OFF, offset)

    # -- allocator --------------------------------------------------------
    #
    # Blocks of line_size << c bytes for size class c, each preceded by one
    # header line: class u8 at +0, free-list link u64 at +8.

    def size_class(self, n: int) -> int:
        c = 0
        while (self.line_size << c) < n:
            c += 1
        if c >= NUM_SIZE_CLASSES:
            raise OutOfMemoryError(f"allocation of {n} bytes exceeds the largest size class")
        return c

    def allocate(self, n: int) -> int:
        """Return the line-aligned offset of a block of at least ``n`` bytes."""
        if n <= 0:
            raise ConfigError("allocation length must be positive")
        c = self.size_class(n)
        ls = self.line_size
        with self._alloc_lock:
            head_slot = FREE_HEADS_OFF + 8 * c
            hdr = self.read_u64(head_slot)
            if hdr:
                self.persist_u64(head_slot, self.read_u64(hdr + 8))
                return hdr + ls
            hdr = self.heap_head
            end = hdr + ls + (ls << c)
            if end > self.size:
                raise OutOfMemoryError(f"heap exhausted: need {end - hdr} bytes at {hdr}")
            self.write(hdr, U8.pack(c) + bytes(7) + U64.pack(0))
            self.flush(hdr, 16)
            self.persist_u64(HEAP_HEAD_OFF, end)
            return hdr + ls

    def block_size(self, offset: int) -> int:
        return self.line_size << self.unpack(U8, offset - self.line_size)[0]

    def free(self, offset: int) -> None:
        ls = self.line_size
        hdr = offset - ls
        if offset % ls or hdr < round_up(ROOT_DIR_END, ls) or offset >= self.heap_head:
            raise BoundsError(f"{offset} is not an allocated block")
        c = self.unpack(U8, hdr)[0]
        if c >= NUM_SIZE_CLASSES:
            raise CorruptImageError(f"block header at {hdr} has size class {c}")
        with self._alloc_lock:
            head_slot = FREE_HEADS_OFF + 8 * c
            self.persist_u64(hdr + 8, self.read_u64(head_slot))
            self.persist_u64(head_slot, hdr)


def open_region(
    path,
    size: int | None = None,
    mode: str = "attach",
    cache_mode: str = "simulated",
    line_size: int = 64,
    plan: CrashPlan | None = None,
) -> Region:
    if cache_mode not in CACHE_MODES:
        raise ConfigError(f"unknown cache mode {cache_mode!r}")
    path = os.fspath(path)
    if mode == "create":
        if size is None:
            raise ConfigError("create needs a size")
        if line_size < 16 or line_size & (line_size - 1):
            raise ConfigError("cache line size must be a power of two >= 16")
        if size % line_size:
            raise ConfigError(f"region size {size} is not a multiple of the line size {line_size}")
        heap_start = round_up(ROOT_DIR_END, line_size)
        if size <= heap_start:
            raise ConfigError(f"region of {size} bytes leaves no heap")
        fh = open(path, "x+b")
        fh.truncate(size)
        mm = mmap.mmap(fh.fileno(), size)
        region = Region(path, fh, mm, size, line_size, cache_mode, plan)
        region.write(ROOT_DIR_OFFSET, bytes(ROOT_DIR_END - ROOT_DIR_OFFSET))
        region.write_u64(HEAP_HEAD_OFF, heap_start)
        region.flush(ROOT_DIR_OFFSET, ROOT_DIR_END - ROOT_DIR_OFFSET)
        # header last: a valid magic means the directory is in place
        region.write(0, HEADER.pack(MAGIC, VERSION, line_size, size, ROOT_DIR_OFFSET))
        region.flush(0, HEADER.size)
        return region
    if mode != "attach":
        raise ConfigError(f"unknown open mode {mode!r}")
    fh = open(path, "r+b")
    try:
        file_size = os.fstat(fh.fileno()).st_size
        if file_size < HEADER.size:
            raise CorruptImageError(f"{path}: too short for a region header")
        magic, version, ls, rsize, root_dir = HEADER.unpack(fh.read(HEADER.size))
        if magic != MAGIC:
            raise CorruptImageError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CorruptImageError(f"{path}: unsupported version {version}")
        if rsize != file_size or root_dir != ROOT_DIR_OFFSET or ls < 16 or ls & (ls - 1) or rsize % ls:
            raise CorruptImageError(f"{path}: inconsistent header")
        mm = mmap.mmap(fh.fileno(), rsize)
    except BaseException:
        fh.close()
        raise
    return Region(path, fh, mm, rsize, ls, cache_mode, plan)
