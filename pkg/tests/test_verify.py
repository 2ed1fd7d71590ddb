import random
import time

import pytest
from hypothesis import given, settings, strategies as st

from nvstack.harness.verify import (
    ORACLE_LIMIT,
    build_graph,
    find_euler_trail,
    oracle_verify,
    place_failed_ops,
    replay_witness,
    verify,
)
from nvstack.harness.workload import RANGES, CasOp, ExecutionLog, generate_workload
from logs import random_log, serial_log


def log_of(init, final, *ops):
    """``ops`` as (old, new, ok) triples."""
    return ExecutionLog(init, [CasOp(i, 1, o, n, ok) for i, (o, n, ok) in enumerate(ops)], final)


def test_graph_examples():
    g = build_graph(log_of(0, 2, (0, 1, True), (1, 0, True), (0, 2, True)))
    assert g.vertices == {0, 1, 2} and len(g.edges) == 3
    assert build_graph(log_of(3, 3)).edges == []
    g = build_graph(log_of(0, 1, (0, 1, True), (0, 1, True), (5, 6, False)))
    assert [(e.old, e.new) for e in g.edges] == [(0, 1), (0, 1)]


def test_trail_example():
    log = log_of(0, 2, (0, 2, True), (0, 1, True), (1, 0, True))
    trail = find_euler_trail(build_graph(log), 0, 2)
    assert [(e.old, e.new) for e in trail] == [(0, 1), (1, 0), (0, 2)]


def test_disconnected():
    log = log_of(0, 3, (0, 1, True), (2, 3, True))
    assert find_euler_trail(build_graph(log), 0, 3) is None
    assert not verify(log)


def test_empty_trail():
    v = verify(log_of(5, 5))
    assert v.serializable and v.witness == []
    assert not verify(log_of(5, 6))


def test_self_loop_and_cycle_away_from_start():
    # 0->1, 1->1, 1->2, 2->1 : the 1-2 cycle hangs off the trail
    log = log_of(0, 1, (0, 1, True), (1, 1, True), (1, 2, True), (2, 1, True))
    v = verify(log)
    assert v.serializable and replay_witness(log, v.witness)


def test_failed_placement_examples():
    trail_log = log_of(0, 2, (0, 1, True), (1, 2, True), (5, 9, False))
    v = verify(trail_log)
    assert v.serializable
    assert not verify(log_of(5, 5, (5, 9, False)))
    assert verify(log_of(0, 1, (0, 1, True), (0, 9, False)))
    log = log_of(0, 1, (0, 1, True), (0, 9, False))
    assert place_failed_ops(log, build_graph(log).edges)


def test_failed_op_witness_position():
    log = log_of(0, 1, (0, 1, True), (0, 9, False))
    w = verify(log).witness
    assert [(o.old, o.result) for o in w] == [(0, True), (0, False)]


def test_incomplete_log_rejected():
    log = ExecutionLog(0, [CasOp(0, 1, 0, 1, None)], 1)
    with pytest.raises(ValueError):
        verify(log)
    with pytest.raises(ValueError):
        verify(ExecutionLog(0, []))


def test_oracle_examples():
    assert oracle_verify(log_of(0, 0))
    assert oracle_verify(log_of(0, 1, (0, 1, True)))
    assert not oracle_verify(log_of(0, 2, (1, 2, True)))
    with pytest.raises(ValueError):
        oracle_verify(log_of(0, 0, *[(0, 0, True)] * (ORACLE_LIMIT + 1)))


def test_log_text_round_trip(tmp_path):
    log = log_of(-3, 4, (-3, 4, True), (7, 8, False))
    log.meta["seed"] = "9"
    path = tmp_path / "x.log"
    log.write(path)
    back = ExecutionLog.read(path)
    assert (back.init, back.final, back.ops, back.meta) == (log.init, log.final, log.ops, {"seed": "9"})
    assert "op 1 1 7 8 fail" in path.read_text()


@pytest.mark.parametrize("text", ["final 3\n", "init 1\nop 1 2 3\n", "init 1\nop 0 1 2 3 maybe\n", "init x\n"])
def test_log_parse_errors(text):
    with pytest.raises(ValueError):
        ExecutionLog.loads(text)


def test_workload_generation():
    a, b = generate_workload(3, 50), generate_workload(3, 50)
    assert a == b
    init, ops = generate_workload(5, 500, "narrow")
    lo, hi = RANGES["narrow"]
    assert all(lo <= v <= hi for op in ops for v in (op.old, op.new)) and lo <= init <= hi
    assert generate_workload(1, 0)[1] == []
    with pytest.raises(ValueError):
        generate_workload(1, 3, "huge")


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32))
def test_verify_agrees_with_oracle(seed):
    log = random_log(seed)
    v = verify(log)
    assert v.serializable == oracle_verify(log)
    if v.serializable:
        assert replay_witness(log, v.witness)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 300))
def test_serial_runs_verify(seed, n):
    rng = random.Random(seed)
    log = serial_log(rng, n, list(range(rng.randint(1, 30))))
    v = verify(log)
    assert v.serializable and replay_witness(log, v.witness)


def test_deterministic():
    log = random_log(11)
    assert verify(log) == verify(log)


def test_large_log_is_fast():
    rng = random.Random(0)
    log = serial_log(rng, 100_000, list(range(21)))
    t = time.perf_counter()
    v = verify(log)
    elapsed = time.perf_counter() - t
    assert v.serializable
    assert elapsed < 1.0, f"verify took {elapsed:.2f}s"
