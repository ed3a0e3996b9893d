"""Malicious behavior scripts, record-replay adversaries, and the attack
harness that drives a candidate register implementation through the
impossibility argument's execution transformations.

The harness operationalizes indistinguishability: instead of reasoning about
what a reader can know, it re-runs executions from scratch with the writer
crashed one step earlier and the would-be malicious process replaying its
recorded register accesses verbatim. Every execution is a strict sequence of
phases (writer prefix, replay block, resets, one fresh read), which is exactly
the shape of the proof's executions S, A_k, B_{k-1}, C/D/E/F.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from . import checker
from .core import (
    BOTTOM,
    CellValue,
    Correct,
    Event,
    Malicious,
    Plain,
    RegisterFile,
    RegisterSpec,
    SeqTuple,
    SignatureOracle,
    decode_cell,
    encode_cell,
)
from .constructions import Algo1Construction, Algo3Construction, U0, WRITER, reader_ids
from .sim import Engine

MARKER: bytes = b"\x01"

DEFAULT_STAGE_BUDGET = 100_000


class StagePreconditionFailed(Exception):
    """An execution transformation's entry property did not hold; this
    signals a harness bug, not a candidate failure."""


class WriterBlocked(Exception):
    """The candidate's solo write exceeded its budget."""


# ---------------------------------------------------------------------------
# Adversary scripts
# ---------------------------------------------------------------------------


class Idle:
    def machine(self, registers: RegisterFile, proc: int):
        return
        yield  # pragma: no cover

    def to_json(self) -> dict:
        return {"kind": "idle"}


class ResetAll:
    """Write initial values to every register the process can write, in
    register-id order."""

    def machine(self, registers: RegisterFile, proc: int):
        for rid in registers.writable_by(proc):
            yield ("w", rid, registers.specs[rid].initial)

    def to_json(self) -> dict:
        return {"kind": "resetall"}


@dataclass
class LieValue:
    reg: str
    cell: CellValue

    def machine(self, registers: RegisterFile, proc: int):
        yield ("w", self.reg, self.cell)

    def to_json(self) -> dict:
        return {"kind": "lie", "reg": self.reg, "cell": encode_cell(self.cell)}


@dataclass
class Replay:
    """Re-issue a recorded access sequence verbatim: writes carry the
    recorded values; reads re-read the recorded registers (results unused)."""

    actions: tuple[tuple, ...]  # ("w", reg, cell) | ("r", reg)

    def machine(self, registers: RegisterFile, proc: int):
        for a in self.actions:
            if a[0] == "w":
                yield ("w", a[1], a[2])
            else:
                yield ("r", a[1])

    def to_json(self) -> dict:
        return {
            "kind": "replay",
            "actions": [
                {"a": "w", "reg": a[1], "cell": encode_cell(a[2])}
                if a[0] == "w"
                else {"a": "r", "reg": a[1]}
                for a in self.actions
            ],
        }


@dataclass
class Sequence:
    items: tuple

    def machine(self, registers: RegisterFile, proc: int):
        for item in self.items:
            yield from item.machine(registers, proc)

    def to_json(self) -> dict:
        return {"kind": "seq", "items": [i.to_json() for i in self.items]}


def script_from_json(obj: dict):
    kind = obj["kind"]
    if kind == "idle":
        return Idle()
    if kind == "resetall":
        return ResetAll()
    if kind == "lie":
        return LieValue(obj["reg"], decode_cell(obj["cell"]))
    if kind == "replay":
        return Replay(
            tuple(
                ("w", a["reg"], decode_cell(a["cell"]))
                if a["a"] == "w"
                else ("r", a["reg"])
                for a in obj["actions"]
            )
        )
    if kind == "seq":
        return Sequence(tuple(script_from_json(i) for i in obj["items"]))
    raise ValueError(f"unknown script kind {kind!r}")


def recorded_actions(events: list[Event], proc: int) -> tuple[tuple, ...]:
    """Extract a process's register accesses from a trace for replay."""
    out = []
    for e in events:
        if e.proc != proc:
            continue
        if e.kind == "reg_write":
            out.append(("w", e.reg, e.value))
        elif e.kind == "reg_read":
            out.append(("r", e.reg))
    return tuple(out)


# ---------------------------------------------------------------------------
# Candidates
# ---------------------------------------------------------------------------

RULE_THM1 = "thm1"  # writer and readers limited to 1W(n-1)R registers
RULE_THM2 = "thm2"  # readers may additionally own 1WnR registers
RULE_UNRESTRICTED = "unrestricted"  # control candidates only


@dataclass
class CandidateImpl:
    name: str
    rule: str
    factory: Callable[[int], object]  # n -> construction-like instance


_REGISTRY: dict[str, CandidateImpl] = {}


def register_candidate(name: str, rule: str, factory: Callable[[int], object]) -> None:
    _REGISTRY[name] = CandidateImpl(name, rule, factory)


def candidate_names() -> list[str]:
    return sorted(_REGISTRY)


def build_candidate(name: str, n: int):
    """Instantiate a registered candidate and enforce its register budget."""
    cand = _REGISTRY[name]
    inst = cand.factory(n)
    if cand.rule in (RULE_THM1, RULE_THM2):
        for spec in inst.specs:
            limit = n - 1 if (spec.writer == inst.writer or cand.rule == RULE_THM1) else n
            if len(spec.readers) > limit:
                raise ValueError(
                    f"candidate {name}: register {spec.reg_id} readable by "
                    f"{len(spec.readers)} readers exceeds the {cand.rule} budget"
                )
    return inst


class NaiveGossip:
    """Deliberately broken candidate: the writer announces once on a
    1W(n-1)R and readers forward what they saw through gossip registers,
    trusting each other blindly."""

    name = "naive-gossip"

    def __init__(self, n: int):
        if n < 3:
            raise ValueError("naive-gossip needs n >= 3")
        self.n = n
        self.oracle = SignatureOracle()
        self.writer = WRITER
        self.readers = reader_ids(n)
        t0 = Plain(SeqTuple(0, U0))
        self.specs = [
            RegisterSpec("NG/W", WRITER, frozenset(self.readers[:-1]), t0)
        ]
        self.gossip: dict[int, str] = {}
        for r in self.readers:
            rid = f"NG/G{r}"
            others = frozenset(x for x in self.readers if x != r)
            self.specs.append(RegisterSpec(rid, r, others, t0))
            self.gossip[r] = rid
        self.classify = {s.reg_id: "candidate" for s in self.specs}
        self.c = 0

    def write_machine(self, value):
        return self._write(value)

    def _write(self, u):
        self.c += 1
        yield ("w", "NG/W", Plain(SeqTuple(self.c, u)))
        return "done"

    def read_machine(self, proc: int):
        return self._read(proc)

    def _read(self, p: int):
        if p in self.specs[0].readers:
            x = yield ("r", "NG/W")
            if isinstance(x, Plain) and x.t.k >= 1:
                yield ("w", self.gossip[p], x)
                return x.t
        for r in self.readers:
            if r == p:
                continue
            y = yield ("r", self.gossip[r])
            if isinstance(y, Plain) and y.t.k >= 1:
                return y.t
        return SeqTuple(0, U0)


class AtomicOneWNR:
    """Control: a genuine atomic 1WnR register (out of the theorem's register
    budget; registered unrestricted)."""

    name = "atomic-1wnr"

    def __init__(self, n: int):
        self.n = n
        self.oracle = SignatureOracle()
        self.writer = WRITER
        self.readers = reader_ids(n)
        self.specs = [
            RegisterSpec("AT/R", WRITER, frozenset(self.readers), Plain(SeqTuple(0, U0)))
        ]
        self.classify = {"AT/R": "candidate"}
        self.c = 0

    def write_machine(self, value):
        return self._write(value)

    def _write(self, u):
        self.c += 1
        yield ("w", "AT/R", Plain(SeqTuple(self.c, u)))
        return "done"

    def read_machine(self, proc: int):
        return self._read(proc)

    def _read(self, p: int):
        x = yield ("r", "AT/R")
        if isinstance(x, Plain):
            return x.t
        return BOTTOM


register_candidate("naive-gossip", RULE_THM1, NaiveGossip)
register_candidate("atomic-1wnr", RULE_UNRESTRICTED, AtomicOneWNR)
register_candidate("algo1", RULE_THM1, lambda n: Algo1Construction(n))
# The signature construction only owns pairwise 1W1Rs, so it fits the
# theorem-1 register budget; the search exhausts against it because a
# replayed signed tuple fails verification in runs where the writer never
# signed it.
register_candidate("algo3", RULE_THM1, lambda n: Algo3Construction(n))


# ---------------------------------------------------------------------------
# Solo write recording and step visibility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SoloStep:
    index: int  # 1-based position among the writer's register accesses
    kind: str  # "reg_read" | "reg_write"
    reg: str


def record_solo_write(name: str, n: int, budget: int = DEFAULT_STAGE_BUDGET):
    """Execution S: a complete solo Write of the marker, readers silent.

    Returns (steps, events) where steps are the writer's register accesses
    s^1..s^m in order.
    """
    inst = build_candidate(name, n)
    eng = Engine(inst.specs, oracle=inst.oracle)
    op = eng.spawn_op(inst.writer, "Write", MARKER, inst.write_machine(MARKER))
    eng.run_queue(step_budget=budget)
    if op.status != "completed":
        raise WriterBlocked(
            f"candidate {name}: solo write did not finish within {budget} steps"
        )
    steps = [
        SoloStep(i + 1, e.kind, e.reg)
        for i, e in enumerate(
            e for e in eng.events if e.kind in ("reg_read", "reg_write")
        )
    ]
    return steps, eng.events


def invisible_to(step: Optional[SoloStep], specs: dict[str, RegisterSpec],
                 readers: list[int]) -> frozenset[int]:
    """Readers to which a writer step is invisible: invocation, response and
    reads are invisible to everyone; a write only to the registers' readers."""
    if step is None or step.kind == "reg_read":
        return frozenset(readers)
    return frozenset(readers) - specs[step.reg].readers


# ---------------------------------------------------------------------------
# Phased execution of transformed runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WriterPhase:
    accesses: int  # register accesses performed before crashing
    respond: bool  # complete operation (no crash)


@dataclass(frozen=True)
class ReplayBlock:
    proc: int
    actions: tuple[tuple, ...]


@dataclass(frozen=True)
class ResetBlock:
    proc: int


@dataclass(frozen=True)
class FreshRead:
    proc: int


@dataclass
class PlanResult:
    events: list[Event]
    reads: list[tuple[int, str, object]]  # (proc, status, returned)
    accesses: int

    def last_read(self) -> tuple[int, str, object]:
        return self.reads[-1]


def run_plan(name: str, n: int, phases: list, stage_budget: int) -> PlanResult:
    """Run phases strictly in order on a fresh candidate instance."""
    inst = build_candidate(name, n)
    eng = Engine(inst.specs, oracle=inst.oracle)
    reads: list[tuple[int, str, object]] = []
    for ph in phases:
        if isinstance(ph, WriterPhase):
            if not ph.respond:
                eng.crash_after_accesses[inst.writer] = ph.accesses
            eng.spawn_op(inst.writer, "Write", MARKER, inst.write_machine(MARKER))
            eng.run_queue(step_budget=len(eng.events) + stage_budget)
        elif isinstance(ph, ReplayBlock):
            eng.spawn_script(ph.proc, Replay(ph.actions).machine(eng.registers, ph.proc))
            eng.run_queue(step_budget=len(eng.events) + stage_budget)
        elif isinstance(ph, ResetBlock):
            eng.spawn_script(ph.proc, ResetAll().machine(eng.registers, ph.proc))
            eng.run_queue(step_budget=len(eng.events) + stage_budget)
        elif isinstance(ph, FreshRead):
            op = eng.spawn_op(ph.proc, "Read", None, inst.read_machine(ph.proc))
            eng.run_queue(
                step_budget=len(eng.events) + 4 * stage_budget,
                per_op_budget=stage_budget,
            )
            reads.append((ph.proc, op.status, op.ret))
        else:
            raise TypeError(ph)
    return PlanResult(eng.events, reads, eng.total_accesses())


def _is_marker(ret) -> bool:
    return isinstance(ret, SeqTuple) and ret.u == MARKER


# ---------------------------------------------------------------------------
# Transformation stages
# ---------------------------------------------------------------------------


@dataclass
class TransformationStage:
    label: str  # S | A | B | C | D | E | F | A0
    k: int  # writer-step index the property refers to
    malicious: Optional[int]
    reader: int
    silent: frozenset[int]


@dataclass
class ExecState:
    """An execution with property P_k, in phase form."""

    k: int
    w_phase: Optional[WriterPhase]
    replays: tuple[ReplayBlock, ...]
    x: int  # the correct reader that read the marker
    p_role: int  # the unconstrained (possibly malicious) reader
    z: frozenset[int]
    events: list[Event] = field(default_factory=list)
    x_ret: object = None

    def stage(self, label: str) -> TransformationStage:
        return TransformationStage(label, self.k, self.p_role, self.x, self.z)

    def base_phases(self) -> list:
        phases: list = []
        if self.w_phase is not None:
            phases.append(self.w_phase)
        phases.extend(self.replays)
        return phases


@dataclass
class ViolationWitness:
    stage: str
    events: list[Event]
    vclass: str
    explanation: str
    stage_log: list[str]


@dataclass
class BlockedWitness:
    stage: str
    events: list[Event]
    reader: int
    explanation: str
    stage_log: list[str]


@dataclass
class Exhausted:
    reason: str
    stage_log: list[str]


AttackResult = object  # ViolationWitness | BlockedWitness | Exhausted


def _check_history(events: list[Event], faults: dict, value_index: dict):
    history = checker.extract_history(events, faults, WRITER, value_index)
    return {
        "property1": checker.check_property1(history, True),
        "property2": checker.check_property2(history, True),
    }


class _Search:
    def __init__(self, name: str, n: int, budget: int, stage_budget: int):
        self.name = name
        self.n = n
        self.inst0 = build_candidate(name, n)
        self.rule = _REGISTRY[name].rule
        self.specs = {s.reg_id: s for s in self.inst0.specs}
        self.readers = list(self.inst0.readers)
        self.budget = budget
        self.stage_budget = stage_budget
        self.spent = 0
        self.log: list[str] = []
        self.value_index = {MARKER: 1, U0: 0}

    def run(self, phases: list) -> PlanResult:
        res = run_plan(self.name, self.n, phases, self.stage_budget)
        self.spent += res.accesses
        return res

    def out_of_budget(self) -> bool:
        return self.spent > self.budget

    def note(self, msg: str) -> None:
        self.log.append(msg)

    def fresh_read_outcome(self, res: PlanResult, stage: str, reader: int):
        """Classify the final fresh read: marker, Blocked, or a dead branch.

        A non-marker return at a stage where linearizability forces the
        marker is itself a violation; it is verified with the checker before
        being reported.
        """
        proc, status, ret = res.last_read()
        if status != "completed":
            self.note(f"{stage}: read by {proc} blocked")
            return BlockedWitness(
                stage,
                res.events,
                proc,
                f"read by correct process {proc} still pending after "
                f"{self.stage_budget} of its steps under a fair schedule",
                self.log,
            )
        if _is_marker(ret):
            return "marker"
        self.note(f"{stage}: read by {proc} returned {ret!r}, not the marker")
        return "other"

    def linearizability_violation(self, res: PlanResult, stage: str,
                                  malicious: Optional[int]):
        """A C/E-stage read that dodges the marker contradicts the proof's
        linearizability step; confirm with the checker and report."""
        faults = {p: Correct() for p in [WRITER] + self.readers}
        if malicious is not None:
            faults[malicious] = Malicious(Idle())
        verdicts = _check_history(res.events, faults, self.value_index)
        for name in ("property2", "property1"):
            v = verdicts[name]
            if not v.ok:
                return ViolationWitness(
                    stage, res.events, v.vclass, v.explanation, self.log
                )
        return None


def attack_search(
    name: str,
    n: int,
    budget: int = 10_000_000,
    stage_budget: int = DEFAULT_STAGE_BUDGET,
) -> AttackResult:
    """Search for a concrete counterexample execution against a candidate.

    Follows the removal argument: starting from a completed solo write plus
    one read, repeatedly crash the writer one step earlier, replaying the one
    process allowed to misbehave, until either some fresh read blocks
    (BlockedWitness), a forced read avoids the marker (ViolationWitness), or
    the writer has no steps left and a correct reader still reads the marker
    (terminal ViolationWitness). Candidates outside the register budget make
    every branch die; that is Exhausted, not an error.
    """
    if n < 3:
        raise ValueError("the impossibility setting needs n >= 3")
    search = _Search(name, n, budget, stage_budget)
    steps, _ = record_solo_write(name, n, stage_budget)
    m = len(steps)
    search.note(f"S: solo write took {m} register steps")

    for q0 in search.readers:
        for p0 in [r for r in search.readers if r != q0]:
            z0 = frozenset(search.readers) - {q0, p0}
            state = ExecState(
                k=m + 1,
                w_phase=WriterPhase(m, respond=True),
                replays=(),
                x=q0,
                p_role=p0,
                z=z0,
            )
            result = _drive_chain(search, state, steps, m)
            if isinstance(result, (ViolationWitness, BlockedWitness)):
                return result
            if result == "budget":
                return Exhausted("budget exhausted", search.log)
    return Exhausted("all branches exhausted", search.log)


def _run_fresh(search: _Search, state_phases: list, reader: int, stage: str):
    res = search.run(state_phases + [FreshRead(reader)])
    outcome = search.fresh_read_outcome(res, stage, reader)
    return res, outcome


def _drive_chain(search: _Search, state: ExecState, steps: list[SoloStep], m: int):
    """Drive one (q, p) role assignment down from P_{m+1} to P_0."""
    # Establish the base execution A_{k}: fresh read after the writer phase.
    res, outcome = _run_fresh(search, state.base_phases(), state.x,
                              f"A_{state.k}(x={state.x})")
    if isinstance(outcome, BlockedWitness):
        return outcome
    if outcome != "marker":
        return None  # dead branch
    state.events, state.x_ret = res.events, res.last_read()[2]

    while state.k > 0:
        if search.out_of_budget():
            return "budget"
        nxt = apply_transformation_chain(search, state, steps, m)
        if nxt is None:
            return None
        if isinstance(nxt, (ViolationWitness, BlockedWitness)):
            return nxt
        state = nxt

    # P_0: the writer crashed right after its invocation. Its invocation is
    # invisible to everyone, so drop the writer entirely (A_0'): a correct
    # reader reading the marker with zero writer steps breaks Property 1.
    phases = list(state.replays)
    res = search.run(phases + [FreshRead(state.x)])
    outcome = search.fresh_read_outcome(res, "A_0'", state.x)
    if isinstance(outcome, BlockedWitness):
        return outcome
    if outcome != "marker":
        return None
    assert not any(e.proc == WRITER for e in res.events), "writer acted in A_0'"
    faults = {p: Correct() for p in [WRITER] + search.readers}
    faults[state.p_role] = Malicious(Idle())
    verdicts = _check_history(res.events, faults, search.value_index)
    v1 = verdicts["property1"]
    if v1.ok:  # pragma: no cover - the marker was never written
        raise StagePreconditionFailed("A_0' read the marker yet Property 1 holds")
    search.note(
        f"A_0': reader {state.x} read the marker with zero writer steps"
    )
    return ViolationWitness(
        "A_0'",
        res.events,
        v1.vclass,
        v1.explanation,
        search.log,
    )


def apply_transformation_chain(search: _Search, state: ExecState,
                               steps: list[SoloStep], m: int):
    """One induction step: from an execution with P_k produce one with
    P_{k-1}, or a witness, or None when every branch dies."""
    k = state.k
    # B_{k-1}: crash the writer one step earlier, replay, rerun x fresh.
    b_w = WriterPhase(min(k - 1, m), respond=False)
    b_phases: list = [b_w, *state.replays]
    res_b, outcome = _run_fresh(search, b_phases, state.x, f"B_{k-1}(x={state.x})")
    if isinstance(outcome, BlockedWitness):
        return outcome
    if outcome != "marker":
        return None

    prev_step = steps[k - 2] if k - 1 >= 1 else None  # s^{k-1}; None = invocation
    inv = invisible_to(prev_step, search.specs, search.readers)
    if not inv and search.rule != RULE_UNRESTRICTED:
        raise StagePreconditionFailed(
            f"step s^{k-1} visible to every reader despite the register budget"
        )

    if prev_step is None or state.x in inv:
        search.note(f"B_{k-1}: s^{k-1} invisible to {state.x}; case 1")
        return ExecState(k - 1, b_w, state.replays, state.x, state.p_role,
                         state.z, res_b.events, res_b.last_read()[2])

    x_actions = recorded_actions(res_b.events, state.x)

    # Subcase 2a: hand the read to a silent reader the step is invisible to.
    for r2 in sorted(inv & state.z):
        outcome = _try_2a(search, state, b_phases, x_actions, r2, k)
        if isinstance(outcome, (ViolationWitness, BlockedWitness, ExecState)):
            return outcome
    # Subcase 2b: the step is invisible to the unconstrained reader.
    if state.p_role in inv:
        for r in sorted(state.z):
            outcome = _try_2b(search, state, b_phases, x_actions, r, k)
            if isinstance(outcome, (ViolationWitness, BlockedWitness, ExecState)):
                return outcome
    search.note(f"B_{k-1}: no eligible reader for s^{k-1}; branch dead")
    return None


def _try_2a(search: _Search, state: ExecState, b_phases: list,
            x_actions: tuple, r2: int, k: int):
    # C_{k-1}^{r2}: after x's read, malicious p_role resets its registers and
    # the correct silent reader r2 reads; linearizability forces the marker.
    c_phases = b_phases + [FreshRead(state.x), ResetBlock(state.p_role)]
    res_c, outcome = _run_fresh(search, c_phases, r2, f"C_{k-1}^{r2}")
    if isinstance(outcome, BlockedWitness):
        return outcome
    if outcome != "marker":
        return search.linearizability_violation(res_c, f"C_{k-1}^{r2}",
                                                state.p_role)
    # D_{k-1}^{r2}: drop p_role's steps; x replays its recorded read.
    d_w = WriterPhase(b_phases[0].accesses, respond=False)
    d_replays = tuple(rb for rb in state.replays if rb.proc != state.p_role) + (
        ReplayBlock(state.x, x_actions),
    )
    res_d, outcome = _run_fresh(search, [d_w, *d_replays], r2, f"D_{k-1}^{r2}")
    if isinstance(outcome, BlockedWitness):
        return outcome
    if outcome != "marker":
        return None
    search.note(f"D_{k-1}^{r2}: case 2a; x={r2}, malicious role -> {state.x}")
    return ExecState(
        k - 1,
        d_w,
        d_replays,
        x=r2,
        p_role=state.x,
        z=(state.z - {r2}) | {state.p_role},
        events=res_d.events,
        x_ret=res_d.last_read()[2],
    )


def _try_2b(search: _Search, state: ExecState, b_phases: list,
            x_actions: tuple, r: int, k: int):
    d_w = WriterPhase(b_phases[0].accesses, respond=False)
    d_replays = tuple(rb for rb in state.replays if rb.proc != state.p_role) + (
        ReplayBlock(state.x, x_actions),
    )
    # C and D exactly as in subcase 2a, with an arbitrary r from Z.
    c_phases = b_phases + [FreshRead(state.x), ResetBlock(state.p_role)]
    res_c, outcome = _run_fresh(search, c_phases, r, f"C_{k-1}^{r}")
    if isinstance(outcome, BlockedWitness):
        return outcome
    if outcome != "marker":
        return search.linearizability_violation(res_c, f"C_{k-1}^{r}", state.p_role)
    res_d, outcome = _run_fresh(search, [d_w, *d_replays], r, f"D_{k-1}^{r}")
    if isinstance(outcome, BlockedWitness):
        return outcome
    if outcome != "marker":
        return None
    # E_{k-1}^r: x (malicious now) resets; the removed reader p_role reads.
    e_phases = [d_w, *d_replays, FreshRead(r), ResetBlock(state.x)]
    res_e, outcome = _run_fresh(search, e_phases, state.p_role, f"E_{k-1}^{r}")
    if isinstance(outcome, BlockedWitness):
        return outcome
    if outcome != "marker":
        return search.linearizability_violation(res_e, f"E_{k-1}^{r}", state.x)
    # F_{k-1}^r: drop x's steps; r replays its D-read; p_role reads fresh.
    r_actions = recorded_actions(res_d.events, r)
    f_replays = tuple(rb for rb in d_replays if rb.proc != state.x) + (
        ReplayBlock(r, r_actions),
    )
    res_f, outcome = _run_fresh(search, [d_w, *f_replays], state.p_role,
                                f"F_{k-1}^{r}")
    if isinstance(outcome, BlockedWitness):
        return outcome
    if outcome != "marker":
        return None
    search.note(f"F_{k-1}^{r}: case 2b; x={state.p_role}, malicious role -> {r}")
    return ExecState(
        k - 1,
        d_w,
        f_replays,
        x=state.p_role,
        p_role=r,
        z=(state.z - {r}) | {state.x},
        events=res_f.events,
        x_ret=res_f.last_read()[2],
    )


def apply_transformation(stage: TransformationStage, base: ExecState,
                         name: str, n: int,
                         stage_budget: int = DEFAULT_STAGE_BUDGET):
    """Apply one named transformation to a base execution, checking its entry
    property first. Returns the resulting ExecState, a witness, or None."""
    if not _is_marker(base.x_ret):
        raise StagePreconditionFailed(
            f"base execution's designated reader {base.x} did not read the marker"
        )
    search = _Search(name, n, budget=10**9, stage_budget=stage_budget)
    steps, _ = record_solo_write(name, n, stage_budget)
    m = len(steps)
    if stage.label == "B":
        return apply_transformation_chain(search, base, steps, m)
    raise ValueError("apply_transformation drives B-led chains; use attack_search")
