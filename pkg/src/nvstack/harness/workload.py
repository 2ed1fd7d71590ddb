"""Random CAS workloads and the plain-text execution log.

Log format, one record per line::

    init <v>
    op <id> <thread> <old> <new> <ok|fail>
    final <v>

Lines starting with ``#`` carry run metadata and are otherwise ignored.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

RANGES = {"narrow": (-10, 10), "wide": (-100_000, 100_000)}


@dataclass
class CasOp:
    op_id: int
    thread: int
    old: int
    new: int
    result: bool | None = None  # None while in flight

    @property
    def ok(self) -> bool:
        return self.result is True


@dataclass
class ExecutionLog:
    init: int
    ops: list[CasOp] = field(default_factory=list)
    final: int | None = None
    meta: dict = field(default_factory=dict)

    def successes(self) -> list[CasOp]:
        return [op for op in self.ops if op.result]

    def failures(self) -> list[CasOp]:
        return [op for op in self.ops if op.result is False]

    def check_complete(self) -> None:
        if self.final is None:
            raise ValueError("log has no final value")
        pending = [op.op_id for op in self.ops if op.result is None]
        if pending:
            raise ValueError(f"ops without a terminal result: {pending[:10]}")

    def dumps(self) -> str:
        lines = [f"# {k} {v}" for k, v in sorted(self.meta.items())]
        lines.append(f"init {self.init}")
        for op in self.ops:
            res = {True: "ok", False: "fail", None: "unknown"}[op.result]
            lines.append(f"op {op.op_id} {op.thread} {op.old} {op.new} {res}")
        if self.final is not None:
            lines.append(f"final {self.final}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExecutionLog":
        init = final = None
        ops, meta = [], {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                meta[key] = value
                continue
            parts = line.split()
            try:
                if parts[0] == "init" and len(parts) == 2 and init is None:
                    init = int(parts[1])
                elif parts[0] == "final" and len(parts) == 2 and final is None:
                    final = int(parts[1])
                elif parts[0] == "op" and len(parts) == 6:
                    res = {"ok": True, "fail": False, "unknown": None}[parts[5]]
                    ops.append(CasOp(int(parts[1]), int(parts[2]), int(parts[3]), int(parts[4]), res))
                else:
                    raise ValueError
            except (ValueError, KeyError):
                raise ValueError(f"line {lineno}: malformed record {raw!r}") from None
        if init is None:
            raise ValueError("log has no init record")
        return cls(init, ops, final, meta)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def read(cls, path) -> "ExecutionLog":
        with open(path) as fh:
            return cls.loads(fh.read())


def generate_workload(seed: int, n_ops: int, value_range: str = "narrow") -> tuple[int, list[CasOp]]:
    """Initial value plus ``n_ops`` CAS operations, sampled uniformly from the range."""
    try:
        lo, hi = RANGES[value_range]
    except KeyError:
        raise ValueError(f"unknown range {value_range!r}") from None
    rng = random.Random(seed)
    init = rng.randint(lo, hi)
    ops = [CasOp(i, 0, rng.randint(lo, hi), rng.randint(lo, hi)) for i in range(n_ops)]
    return init, ops
