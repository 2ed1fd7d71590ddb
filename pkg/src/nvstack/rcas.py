"""Recoverable compare-and-swap register with a notification matrix.

The register is one 8-byte word packing ``value: i32 | owner: u8 | seq: u24``.
``(owner, seq)`` tags each installed value instance, so repeated application
values stay distinguishable.  Before process ``p`` overwrites an instance
installed by ``q`` it records ``(value, seq)`` of that instance in ``R[q][p]``.
A recovering ``q`` thus learns that its CAS took effect even when the word has
moved on.  The buggy variant drops the matrix and can lose or repeat a
successful CAS across a crash.

Layout (each item on its own cache line): header, word, then ``R`` as an
``n x n`` array with ``R[i][j]`` written only by ``j``.  Every write is flushed
before the next persistent write, as if the machine had no volatile cache.
"""

from __future__ import annotations

import struct

from .errors import ConfigError, CorruptImageError
from .region import Region

RCAS_MAGIC = b"RCAS"
HEADER = struct.Struct("<4sBB")
VARIANTS = ("correct", "buggy")
MAX_PROCS = 255
MAX_SEQ = (1 << 24) - 1


def pack_word(value: int, owner: int, seq: int) -> int:
    return (value & 0xFFFFFFFF) | (owner << 32) | (seq << 40)


def unpack_word(word: int) -> tuple[int, int, int]:
    value = word & 0xFFFFFFFF
    if value & 0x80000000:
        value -= 1 << 32
    return value, (word >> 32) & 0xFF, word >> 40


def pack_note(value: int, seq: int) -> int:
    return (value & 0xFFFFFFFF) | (seq << 32) | (1 << 56)


def unpack_note(note: int) -> tuple[int, int] | None:
    if not note >> 56:
        return None
    value = note & 0xFFFFFFFF
    if value & 0x80000000:
        value -= 1 << 32
    return value, (note >> 32) & 0xFFFFFF


class RcasRegister:
    def __init__(self, region: Region, offset: int):
        magic, n, variant = region.unpack(HEADER, offset)
        if magic != RCAS_MAGIC or not 0 < n <= MAX_PROCS or variant >= len(VARIANTS):
            raise CorruptImageError(f"no CAS register at {offset}")
        ls = region.line_size
        self.region = region
        self.offset = offset
        self.n = n
        self.variant = VARIANTS[variant]
        self.word_offset = offset + ls
        self._r_base = offset + 2 * ls
        region.mark_shared(self.word_offset, (n * n + 1) * ls)

    @classmethod
    def attach(cls, region: Region) -> "RcasRegister":
        if not region.rcas_root:
            raise ConfigError("region holds no CAS register")
        return cls(region, region.rcas_root)

    def note_offset(self, i: int, j: int) -> int:
        """Offset of ``R[i][j]``: written by ``j`` to tell ``i`` it was overwritten."""
        return self._r_base + ((i - 1) * self.n + (j - 1)) * self.region.line_size

    def read_word(self) -> tuple[int, int, int]:
        return unpack_word(self.region.load_u64(self.word_offset))

    def notes_for(self, p: int) -> list[tuple[int, int] | None]:
        return [unpack_note(self.region.read_u64(self.note_offset(p, j))) for j in range(1, self.n + 1)]

    def _check(self, p, seq):
        if not 1 <= p <= self.n:
            raise ConfigError(f"process id {p} outside [1, {self.n}]")
        if not 1 <= seq <= MAX_SEQ:
            raise ConfigError(f"sequence tag {seq} outside [1, {MAX_SEQ}]")


def rcas_init(region: Region, init_value: int, n_procs: int, variant: str = "correct") -> RcasRegister:
    if region.rcas_root:
        raise ConfigError("the region already holds a CAS register")
    if not 0 < n_procs <= MAX_PROCS:
        raise ConfigError(f"process count must be within [1, {MAX_PROCS}]")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    ls = region.line_size
    offset = region.allocate((2 + n_procs * n_procs) * ls)
    region.persist_u64(offset + ls, pack_word(init_value, 0, 0))
    region.write(offset + 2 * ls, bytes(n_procs * n_procs * ls))
    region.flush(offset + 2 * ls, n_procs * n_procs * ls)
    region.write(offset, HEADER.pack(RCAS_MAGIC, n_procs, VARIANTS.index(variant)))
    region.flush(offset, HEADER.size)
    region.set_rcas_root(offset)
    return RcasRegister(region, offset)


def rcas_read(reg: RcasRegister) -> int:
    return reg.read_word()[0]


def rcas_cas(reg: RcasRegister, p: int, old: int, new: int, seq: int) -> bool:
    """CAS by process ``p``; ``seq`` tags the instance this call would install."""
    reg._check(p, seq)
    region = reg.region
    while True:
        word = region.load_u64(reg.word_offset)
        value, owner, owner_seq = unpack_word(word)
        if value != old:
            return False
        if owner:
            # notify the owner before its instance can disappear
            at = reg.note_offset(owner, p)
            region.persist_u64(at, pack_note(value, owner_seq))
        if region.cas_u64(reg.word_offset, word, pack_word(new, p, seq)):
            region.flush(reg.word_offset, 8)
            return True


def rcas_recover(reg: RcasRegister, p: int, old: int, new: int, seq: int) -> bool:
    reg._check(p, seq)
    if reg.read_word() == (new, p, seq):
        reg.region.flush(reg.word_offset, 8)
        return True
    if (new, seq) in reg.notes_for(p):
        return True
    return rcas_cas(reg, p, old, new, seq)


def rcas_cas_buggy(reg: RcasRegister, p: int, old: int, new: int, seq: int) -> bool:
    reg._check(p, seq)
    region = reg.region
    while True:
        word = region.load_u64(reg.word_offset)
        if unpack_word(word)[0] != old:
            return False
        if region.cas_u64(reg.word_offset, word, pack_word(new, p, seq)):
            region.flush(reg.word_offset, 8)
            return True


def rcas_recover_buggy(reg: RcasRegister, p: int, old: int, new: int, seq: int) -> bool:
    reg._check(p, seq)
    if reg.read_word() == (new, p, seq):
        reg.region.flush(reg.word_offset, 8)
        return True
    return rcas_cas_buggy(reg, p, old, new, seq)
