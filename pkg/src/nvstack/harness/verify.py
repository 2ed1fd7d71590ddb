"""Serializability of single-register CAS histories.

Successful ``CAS(a, b)`` operations become edges ``a -> b`` of a multigraph
over register values.  A serial order of the successes is exactly a trail that
uses every edge once, starting at the initial value and ending at the final
one.  A failed ``CAS(old, new)`` can be slotted in at any moment the register
holds something other than ``old``.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .workload import CasOp, ExecutionLog

ORACLE_LIMIT = 8


@dataclass
class ValueGraph:
    vertices: set[int]
    edges: list[CasOp] = field(default_factory=list)  # one per successful op, in log order

    def out_edges(self) -> dict[int, list[int]]:
        adj = defaultdict(list)
        for i, op in enumerate(self.edges):
            adj[op.old].append(i)
        return adj


@dataclass
class Verdict:
    serializable: bool
    witness: list[CasOp] | None = None
    reason: str = "none"  # degree-imbalance | disconnected | failed-op-unplaceable | none

    def __bool__(self) -> bool:
        return self.serializable


def build_graph(log: ExecutionLog) -> ValueGraph:
    vertices = {log.init}
    for op in log.ops:
        vertices.add(op.old)
        vertices.add(op.new)
    return ValueGraph(vertices, log.successes())


def _degrees_ok(graph: ValueGraph, init: int, final: int) -> bool:
    balance = Counter()
    for op in graph.edges:
        balance[op.old] += 1
        balance[op.new] -= 1
    want = Counter()
    if init != final:
        want[init], want[final] = 1, -1
    return all(balance[v] == want[v] for v in set(balance) | set(want))


def find_euler_trail(graph: ValueGraph, init: int, final: int) -> list[CasOp] | None:
    """Edges in trail order from ``init`` to ``final``, or ``None`` if no such trail exists."""
    if not graph.edges:
        return [] if init == final else None
    if not _degrees_ok(graph, init, final):
        return None
    adj = graph.out_edges()
    cursor = defaultdict(int)
    stack = [(init, -1)]
    trail = []
    while stack:
        v, via = stack[-1]
        out = adj.get(v, ())
        if cursor[v] < len(out):
            e = out[cursor[v]]
            cursor[v] += 1
            stack.append((graph.edges[e].new, e))
        else:
            stack.pop()
            if via >= 0:
                trail.append(graph.edges[via])
    if len(trail) != len(graph.edges):
        return None  # some edges lie outside init's component
    trail.reverse()
    return trail


def visited_values(init: int, trail: list[CasOp]) -> list[int]:
    return [init] + [op.new for op in trail]


def place_failed_ops(log: ExecutionLog, trail: list[CasOp]) -> bool:
    held = set(visited_values(log.init, trail))
    return all(any(v != op.old for v in held) for op in log.failures())


def _interleave(log: ExecutionLog, trail: list[CasOp]) -> list[CasOp]:
    values = visited_values(log.init, trail)
    slots = defaultdict(list)
    for op in log.failures():
        # first point in the serial order where the register differs from op.old
        i = next(i for i, v in enumerate(values) if v != op.old)
        slots[i].append(op)
    witness = list(slots[0])
    for i, op in enumerate(trail, 1):
        witness.append(op)
        witness.extend(slots[i])
    return witness


def verify(log: ExecutionLog) -> Verdict:
    log.check_complete()
    graph = build_graph(log)
    if graph.edges and not _degrees_ok(graph, log.init, log.final):
        return Verdict(False, reason="degree-imbalance")
    trail = find_euler_trail(graph, log.init, log.final)
    if trail is None:
        reason = "disconnected" if graph.edges else "degree-imbalance"
        return Verdict(False, reason=reason)
    if not place_failed_ops(log, trail):
        return Verdict(False, reason="failed-op-unplaceable")
    return Verdict(True, witness=_interleave(log, trail))


def replay_witness(log: ExecutionLog, witness: list[CasOp]) -> bool:
    """Run ``witness`` serially and check every reported result and the final value."""
    if sorted(op.op_id for op in witness) != sorted(op.op_id for op in log.ops):
        return False
    reg = log.init
    for op in witness:
        if op.result:
            if reg != op.old:
                return False
            reg = op.new
        elif reg == op.old:
            return False
    return reg == log.final


def oracle_verify(log: ExecutionLog) -> bool:
    """Exhaustive search over serial orders of the successful ops (at most eight)."""
    log.check_complete()
    succ = log.successes()
    if len(succ) > ORACLE_LIMIT:
        raise ValueError(f"oracle handles at most {ORACLE_LIMIT} successful ops, got {len(succ)}")
    failed_olds = {op.old for op in log.failures()}
    remaining = Counter((op.old, op.new) for op in succ)

    def search(reg, seen):
        if not +remaining:
            return reg == log.final and all(any(v != old for v in seen) for old in failed_olds)
        for pair in list(remaining):
            if remaining[pair] and pair[0] == reg:
                remaining[pair] -= 1
                found = search(pair[1], seen + [pair[1]])
                remaining[pair] += 1
                if found:
                    return True
        return False

    return search(log.init, [log.init])
