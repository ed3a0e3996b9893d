import pytest

from byzregs import checker, sim
from byzregs.checker import (
    OpRecord,
    TooLarge,
    UnfairScheduleError,
    check_bottom_returns,
    check_property1,
    check_property2,
    check_wait_freedom,
    extract_history,
    oracle_linearize,
    validate_internal_invariants,
)
from byzregs.constructions import build_instance
from byzregs.core import (
    Commit,
    Correct,
    Crash,
    Event,
    Malicious,
    Plain,
    SeqTuple,
    Signed,
    sig_token,
)
from byzregs.adversary import Idle


def w(k, invoke, respond):
    return OpRecord(0, "Write", k, value=f"v{k}".encode(),
                    invoke_step=invoke, respond_step=respond)


def r(proc, k, invoke, respond, honest=True, bottom=False):
    return OpRecord(proc, "Read", k, invoke_step=invoke, respond_step=respond,
                    honest=honest, bottom=bottom)


# -- property 1 ---------------------------------------------------------------


def test_p1_read_of_completed_write_passes():
    h = [w(1, 0, 1), r(1, 1, 2, 3)]
    assert check_property1(h, True).ok


def test_p1_stale_read_after_completed_write_fails():
    h = [w(1, 0, 1), r(1, 0, 2, 3)]
    v = check_property1(h, True)
    assert not v.ok and v.vclass == "Property1" and v.witnesses


def test_p1_concurrent_write_passes():
    h = [w(1, 0, 1), w(2, 2, 6), r(1, 2, 3, 4)]
    assert check_property1(h, True).ok


def test_p1_pending_write_counts_as_concurrent():
    h = [w(1, 0, None), r(1, 1, 2, 3)]
    assert check_property1(h, True).ok


def test_p1_initial_value_with_no_preceding_write():
    h = [r(1, 0, 0, 1), w(1, 2, 3)]
    assert check_property1(h, True).ok


def test_p1_unknown_value_fails():
    h = [r(1, None, 0, 1)]
    v = check_property1(h, True)
    assert not v.ok


# -- property 2 ---------------------------------------------------------------


def test_p2_monotone_reads_pass():
    h = [w(1, 0, 1), w(2, 2, 3), r(1, 1, 4, 5), r(2, 2, 6, 7)]
    assert check_property2(h, True).ok


def test_p2_inversion_fails_with_both_ops_as_witnesses():
    h = [w(1, 0, 1), w(2, 2, 3), r(1, 2, 4, 5), r(2, 1, 6, 7)]
    v = check_property2(h, True)
    assert not v.ok
    assert set(v.witnesses) == {4, 5, 6, 7}


def test_p2_concurrent_reads_pass():
    h = [w(1, 0, 1), w(2, 2, 3), r(1, 2, 4, 7), r(2, 1, 5, 6)]
    assert check_property2(h, True).ok


def test_vacuity_under_malicious_writer():
    h = [w(1, 0, 1), r(1, 5, 2, 3), r(2, 1, 4, 5)]
    assert check_property1(h, False).ok
    assert check_property2(h, False).ok


# -- bottom returns -----------------------------------------------------------


def test_bottom_with_honest_writer_fails():
    h = [r(1, None, 0, 1, bottom=True)]
    v = check_bottom_returns(h, True)
    assert not v.ok and v.vclass == "BottomReturn"


def test_bottom_with_malicious_writer_passes():
    h = [r(1, None, 0, 1, bottom=True)]
    assert check_bottom_returns(h, False).ok


def test_no_bottoms_passes():
    assert check_bottom_returns([w(1, 0, 1), r(1, 1, 2, 3)], True).ok


# -- wait freedom -------------------------------------------------------------


def _trace(ops, schedule="seeded"):
    return sim.Trace(events=[], ops=ops, meta={"schedule": schedule})


def test_wait_freedom_violation_when_guaranteed():
    ops = [sim.OpResult(0, 1, "Read", None, invoke_step=0, status="pending",
                        reason="per-op budget")]
    v = check_wait_freedom(_trace(ops), {0: Correct(), 1: Correct()})
    assert not v.ok and v.vclass == "WaitFreedom"


def test_wait_freedom_outside_guarantee_passes_with_note():
    ops = [sim.OpResult(0, 1, "Read", None, invoke_step=0, status="pending",
                        reason="per-op budget")]
    faults = {0: Crash(3), 1: Correct(), 2: Malicious(Idle())}
    v = check_wait_freedom(_trace(ops), faults)
    assert v.ok and "outside guarantee" in v.explanation


def test_wait_freedom_scripted_pending_refuses():
    ops = [sim.OpResult(0, 1, "Read", None, invoke_step=0, status="pending",
                        reason="schedule exhausted")]
    with pytest.raises(UnfairScheduleError):
        check_wait_freedom(_trace(ops, "scripted"), {0: Correct(), 1: Correct()})


def test_wait_freedom_crashed_owner_not_counted():
    ops = [sim.OpResult(0, 1, "Read", None, invoke_step=0, status="crashed-owner")]
    v = check_wait_freedom(_trace(ops), {0: Correct(), 1: Crash(5)})
    assert v.ok


# -- internal invariants ------------------------------------------------------


def _algo1_ctx(n=3):
    inst = build_instance("algo1", n)
    return {s.reg_id: s for s in inst.specs}, inst.classify


def test_internal_invariants_pass_on_real_trace():
    sc = sim.Scenario("algo1", 3, {p: Correct() for p in range(4)},
                      [sim.WorkItem(0, "write", value=b"a"),
                       sim.WorkItem(2, "read", after_op=0)],
                      sim.Seeded(5))
    tr = sim.run(sc)
    specs, classify = _algo1_ctx()
    assert validate_internal_invariants(tr.events, specs, classify,
                                        sc.faults).ok


def test_internal_invariants_commit_order_inversion():
    specs, classify = _algo1_ctx()
    events = [
        Event(0, 0, 0, "reg_write", reg="I3/Rwp", value=Commit(SeqTuple(2, b"b"))),
        Event(1, 0, 0, "reg_write", reg="I3/Rwp", value=Commit(SeqTuple(1, b"a"))),
    ]
    v = validate_internal_invariants(events, specs, classify, {0: Correct()})
    assert not v.ok and v.witnesses == [1]


def test_internal_invariants_announce_monotonicity_break():
    specs, classify = _algo1_ctx(2)
    events = [
        Event(0, 1, 0, "reg_write", reg="I2/RpQ", value=Plain(SeqTuple(2, b"b"))),
        Event(1, 1, 0, "reg_write", reg="I2/RpQ", value=Plain(SeqTuple(1, b"a"))),
    ]
    v = validate_internal_invariants(events, specs, classify, {1: Correct()})
    assert not v.ok and v.witnesses == [1]


def test_internal_invariants_invalid_signature_acceptance():
    inst = build_instance("algo3", 3)
    specs = {s.reg_id: s for s in inst.specs}
    fake = Signed(SeqTuple(5, b"evil"), 0, sig_token(SeqTuple(5, b"evil"), 0))
    events = [
        Event(0, 1, 0, "reg_write", reg="Is/R1_2", value=fake),
    ]
    v = validate_internal_invariants(events, specs, inst.classify, {1: Correct()})
    assert not v.ok and "signed" in v.explanation


def test_internal_invariants_skip_malicious_events():
    specs, classify = _algo1_ctx()
    events = [
        Event(0, 0, 0, "reg_write", reg="I3/Rwp", value=Commit(SeqTuple(2, b"b"))),
        Event(1, 0, 0, "reg_write", reg="I3/Rwp", value=Commit(SeqTuple(1, b"a"))),
    ]
    v = validate_internal_invariants(events, specs, classify,
                                     {0: Malicious(Idle())})
    assert v.ok


def test_read_return_needs_writer_channel_evidence():
    specs, classify = _algo1_ctx()
    events = [
        Event(0, 2, 0, "invoke", op="Read"),
        Event(1, 2, 0, "reg_read", reg="I3/RwQ/I2/RwQ",
              value=Commit(SeqTuple(0, Plain(SeqTuple(0, b""))))),
        Event(2, 2, 0, "respond", op="Read", ret=SeqTuple(4, b"x")),
    ]
    v = validate_internal_invariants(events, specs, classify, {2: Correct()})
    assert not v.ok and "without observing" in v.explanation


# -- brute-force oracle -------------------------------------------------------


def test_oracle_empty_history():
    assert oracle_linearize([])


def test_oracle_rejects_inversion():
    h = [w(1, 0, 1), w(2, 2, 3), r(1, 2, 4, 5), r(2, 1, 6, 7)]
    assert not oracle_linearize(h)


def test_oracle_places_concurrent_read_after_its_write():
    h = [w(1, 0, 3), r(1, 1, 1, 2)]
    assert oracle_linearize(h)


def test_oracle_pending_write_optional():
    h = [w(1, 0, None), r(1, 0, 1, 2), r(2, 1, 3, 4)]
    assert oracle_linearize(h)


def test_oracle_malicious_writer_vacuous():
    h = [OpRecord(0, "Write", 1, invoke_step=0, respond_step=1, honest=False),
         r(1, 7, 2, 3)]
    assert oracle_linearize(h)


def test_oracle_cap():
    h = [w(k, 2 * k, 2 * k + 1) for k in range(1, 10)]
    with pytest.raises(TooLarge):
        oracle_linearize(h)


def test_witness_soundness_property2():
    h = [w(1, 0, 1), w(2, 2, 3), r(1, 2, 4, 5), r(2, 1, 6, 7)]
    v = check_property2(h, True)
    assert not v.ok
    sub = [op for op in h if op.kind == "Read"
           and {op.invoke_step, op.respond_step} & set(v.witnesses)]
    assert not check_property2(sub, True).ok


def test_extract_history_from_trace():
    sc = sim.Scenario("algo1", 3, {p: Correct() for p in range(4)},
                      [sim.WorkItem(0, "write", value=b"a"),
                       sim.WorkItem(2, "read", after_op=0)],
                      sim.Seeded(5))
    tr = sim.run(sc)
    h = extract_history(tr.events, sc.faults)
    assert [op.kind for op in h] == ["Write", "Read"]
    assert h[0].index == 1
    assert h[1].index == 1
    assert h[1].invoke_step < h[1].respond_step


def test_witness_soundness_property1():
    h = [w(1, 0, 1), r(1, 0, 2, 3)]
    v = check_property1(h, True)
    assert not v.ok
    steps = set(v.witnesses)
    sub = [op for op in h
           if {op.invoke_step, op.respond_step} & steps]
    assert not check_property1(sub, True).ok
