import threading

import pytest

from nvstack.errors import ConfigError, SimulatedCrash
from nvstack.harness.experiment import ExperimentConfig, run_experiment
from nvstack.harness.schedule import overwrite_then_crash
from nvstack.harness.verify import verify
from nvstack.rcas import (
    RcasRegister,
    pack_note,
    pack_word,
    rcas_cas,
    rcas_cas_buggy,
    rcas_init,
    rcas_read,
    rcas_recover,
    rcas_recover_buggy,
    unpack_note,
    unpack_word,
)
from nvstack.region import CrashPlan
from conftest import reopen

CAS = {"correct": (rcas_cas, rcas_recover), "buggy": (rcas_cas_buggy, rcas_recover_buggy)}


def test_word_packing():
    w = pack_word(-3, 2, 0xABCDEF)
    assert w.to_bytes(8, "little") == bytes.fromhex("fdffffff" "02" "efcdab")
    assert unpack_word(w) == (-3, 2, 0xABCDEF)
    assert unpack_note(pack_note(-7, 12)) == (-7, 12)
    assert unpack_note(0) is None


def test_init_and_read(region):
    r = region()
    reg = rcas_init(r, 5, 2)
    assert rcas_read(reg) == 5
    r2 = reopen(r)
    assert rcas_read(RcasRegister.attach(r2)) == 5
    with pytest.raises(ConfigError):
        rcas_init(r2, 1, 2)
    r2.close()


def test_init_validation(region):
    with pytest.raises(ConfigError):
        rcas_init(region(), 0, 0)
    with pytest.raises(ConfigError):
        rcas_init(region(), 0, 2, "sloppy")


def test_word_stays_in_one_line(region):
    r = region()
    reg = rcas_init(r, 0, 4)
    assert len(r.lines(reg.word_offset, 8)) == 1
    assert all(len(r.lines(reg.note_offset(i, j), 8)) == 1 for i in range(1, 5) for j in range(1, 5))


@pytest.mark.parametrize("variant", ["correct", "buggy"])
def test_solo_cas(region, variant):
    cas, _ = CAS[variant]
    reg = rcas_init(region(), 5, 1, variant)
    assert cas(reg, 1, 5, 7, 1)
    assert rcas_read(reg) == 7
    assert not cas(reg, 1, 6, 8, 2)
    assert rcas_read(reg) == 7


def test_bad_process_or_tag(region):
    reg = rcas_init(region(), 0, 2)
    with pytest.raises(ConfigError):
        rcas_cas(reg, 3, 0, 1, 1)
    with pytest.raises(ConfigError):
        rcas_cas(reg, 1, 0, 1, 0)


@pytest.mark.parametrize("order", [(1, 2), (2, 1)])
def test_race_exactly_one_wins(region, order):
    reg = rcas_init(region(), 5, 2)
    new = {1: 7, 2: 9}
    results = {p: rcas_cas(reg, p, 5, new[p], 1) for p in order}
    assert sorted(results.values()) == [False, True]
    winner = next(p for p, ok in results.items() if ok)
    assert winner == order[0] and rcas_read(reg) == new[winner]


def test_threaded_race(region):
    for _ in range(20):
        reg = rcas_init(region(), 5, 2)
        results = {}
        ts = [threading.Thread(target=lambda p=p, v=v: results.__setitem__(p, rcas_cas(reg, p, 5, v, 1)))
              for p, v in ((1, 7), (2, 9))]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert sorted(results.values()) == [False, True]
        assert rcas_read(reg) == {1: 7, 2: 9}[next(p for p, ok in results.items() if ok)]


def test_recover_after_success_does_not_reapply(region):
    r = region()
    reg = rcas_init(r, 5, 2)
    assert rcas_cas(reg, 1, 5, 7, 1)
    r.crash()
    r2 = reopen(r)
    reg2 = RcasRegister.attach(r2)
    assert rcas_recover(reg2, 1, 5, 7, 1)
    assert reg2.read_word() == (7, 1, 1)
    r2.close()


def test_crash_before_hardware_cas_behaves_fresh(region):
    r = region()
    reg = rcas_init(r, 5, 2)
    assert rcas_cas(reg, 2, 5, 6, 1)  # owner 2 now, so process 1 writes a note first
    r.plan = CrashPlan.at(r.flush_counter)  # the note flush, before the CAS instruction
    with pytest.raises(SimulatedCrash):
        rcas_cas(reg, 1, 6, 8, 1)
    r2 = reopen(r)
    reg2 = RcasRegister.attach(r2)
    assert reg2.read_word() == (6, 2, 1)
    assert rcas_recover(reg2, 1, 6, 8, 1)
    assert reg2.read_word() == (8, 1, 1)
    r2.close()


def test_unflushed_cas_is_lost(region):
    r = region()
    reg = rcas_init(r, 5, 2)
    r.plan = CrashPlan.at(r.flush_counter)  # the word flush right after the CAS
    with pytest.raises(SimulatedCrash):
        rcas_cas(reg, 1, 5, 7, 1)
    r2 = reopen(r)
    reg2 = RcasRegister.attach(r2)
    assert rcas_read(reg2) == 5
    assert rcas_recover(reg2, 1, 5, 7, 1)
    assert rcas_read(reg2) == 7
    r2.close()


@pytest.mark.parametrize("variant,expect_final", [("correct", 0), ("buggy", 1)])
def test_overwritten_success(region, variant, expect_final):
    # p1: CAS(0,1) wins; p2: CAS(1,0) overwrites; crash before p1 returns
    cas, recover = CAS[variant]
    r = region()
    reg = rcas_init(r, 0, 2, variant)
    assert cas(reg, 1, 0, 1, 1)
    assert cas(reg, 2, 1, 0, 1)
    r.crash()
    r2 = reopen(r)
    reg2 = RcasRegister.attach(r2)
    assert recover(reg2, 1, 0, 1, 1)  # buggy: true only because the CAS ran a second time
    assert rcas_read(reg2) == expect_final
    if variant == "correct":
        assert (1, 1) in reg2.notes_for(1)
    r2.close()


def test_immediate_flush_discipline(region):
    r = region()
    reg = rcas_init(r, 0, 3)
    r.trace = []
    seq = {1: 0, 2: 0, 3: 0}
    for i in range(30):
        p = i % 3 + 1
        seq[p] += 1
        rcas_cas(reg, p, i % 4, (i + 1) % 4, seq[p])
    pending = None
    for kind, off, n in r.trace:
        if kind == "write":
            assert pending is None, "second write before the first was flushed"
            pending = set(r.lines(off, n))
        else:
            assert pending is not None and set(r.lines(off, n)) == pending
            pending = None
    assert pending is None


def test_scripted_schedule_through_runtime(tmp_path):
    good = overwrite_then_crash(tmp_path / "good.nvr", "correct")
    bad = overwrite_then_crash(tmp_path / "bad.nvr", "buggy")
    assert verify(good).serializable and good.final == 0
    assert not verify(bad).serializable and bad.final == 1


def test_no_crash_variants_agree(tmp_path):
    logs = []
    for variant in ("correct", "buggy"):
        cfg = ExperimentConfig(image=tmp_path / f"{variant}.nvr", threads=1, ops=200, seed=4, variant=variant)
        logs.append(run_experiment(cfg))
    assert [(o.op_id, o.result) for o in logs[0].ops] == [(o.op_id, o.result) for o in logs[1].ops]
    assert logs[0].final == logs[1].final
