"""Deterministic scheduler for register step machines.

A step machine is a Python generator that yields one action per resumption:

    ("r", reg_id)            -> resumed with the CellValue read
    ("w", reg_id, cell)      -> resumed with None once the write is applied
    ("fork", gen_a, gen_b)   -> cobegin/coend: both branches become
                                schedulable; the first branch to return a
                                non-None value resolves the forking frame and
                                the losing branch is cancelled at its next
                                resumption point.

One resumption performs at most one register access; local computation and
control flow are free. All interleaving decisions flow through the scheduler,
so a scenario (construction, faults, workload, schedule, budgets) replays to
a byte-identical trace.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Generator, Iterable, Optional, Union

from . import constructions
from .core import (
    Correct,
    Crash,
    CrashedActor,
    Event,
    FaultModel,
    Malicious,
    MalformedScenario,
    Payload,
    RegisterFile,
    RegisterSpec,
    SignatureOracle,
    decode_payload,
    encode_payload,
    is_malicious,
)

FAIRNESS_CONSTANT = 4
DEFAULT_STEP_BUDGET = 1_000_000
DEFAULT_PER_OP_BUDGET = 100_000


@dataclass(frozen=True)
class Seeded:
    seed: int


@dataclass(frozen=True)
class Scripted:
    picks: tuple[tuple[int, int], ...]


Schedule = Union[Seeded, Scripted]


@dataclass
class WorkItem:
    proc: int
    op: str  # "write" | "read"
    value: Optional[Payload] = None
    after_op: Optional[int] = None
    after_step: Optional[int] = None


@dataclass
class Scenario:
    construction: str
    n: int
    faults: dict[int, FaultModel]
    workload: list[WorkItem]
    schedule: Schedule
    step_budget: int = DEFAULT_STEP_BUDGET
    per_op_budget: int = DEFAULT_PER_OP_BUDGET


@dataclass
class OpResult:
    index: int
    proc: int
    kind: str
    arg: Optional[Payload]
    invoke_step: Optional[int] = None
    respond_step: Optional[int] = None
    ret: object = None
    status: str = "pending"  # completed | pending | crashed-owner
    reason: Optional[str] = None
    steps: int = 0


@dataclass
class Trace:
    events: list[Event]
    ops: list[OpResult]
    meta: dict


class _Thread:
    __slots__ = (
        "owner",
        "tid",
        "gen",
        "pending",
        "op",
        "frame",
        "child_frames",
        "parked",
        "cancelled",
        "done",
    )

    def __init__(self, owner: int, tid: int, gen: Generator, op: Optional[OpResult]):
        self.owner = owner
        self.tid = tid
        self.gen = gen
        self.pending = None
        self.op = op
        self.frame: Optional[_JoinFrame] = None
        self.child_frames: list[_JoinFrame] = []
        self.parked = False
        self.cancelled = False
        self.done = False

    def runnable(self) -> bool:
        return not (self.parked or self.cancelled or self.done)


class _JoinFrame:
    __slots__ = ("parent", "branches", "resolved", "dead")

    def __init__(self, parent: _Thread):
        self.parent = parent
        self.branches: list[_Thread] = []
        self.resolved = False
        self.dead = 0


class Engine:
    """Register substrate plus thread scheduling; shared by scenario runs and
    the attack harness (which drives phases directly)."""

    def __init__(
        self,
        specs: Iterable[RegisterSpec],
        oracle: Optional[SignatureOracle] = None,
        seed: int = 0,
        record_resumptions: bool = False,
    ):
        self.registers = RegisterFile(specs)
        self.oracle = oracle if oracle is not None else SignatureOracle()
        self.rng = random.Random(seed)
        self.events: list[Event] = []
        self.ops: list[OpResult] = []
        self.crashed: set[int] = set()
        self.crash_at: dict[int, int] = {}
        self.crash_after_accesses: dict[int, int] = {}
        self.access_count: dict[int, int] = {}
        self.procs_with_events: set[int] = set()
        self.queue: list[_Thread] = []
        self.threads: dict[tuple[int, int], _Thread] = {}
        self._tid_counters: dict[int, int] = {}
        self.resumption_log: Optional[list[tuple[int, int]]] = (
            [] if record_resumptions else None
        )

    # -- events ------------------------------------------------------------

    def _emit(self, **kw) -> Event:
        e = Event(step=len(self.events), **kw)
        self.events.append(e)
        if e.kind != "crash":
            self.procs_with_events.add(e.proc)
        self._sweep_crashes()
        return e

    def _sweep_crashes(self) -> None:
        while True:
            due = [
                p
                for p, at in self.crash_at.items()
                if p not in self.crashed and len(self.events) >= at
            ]
            if not due:
                return
            self._mark_crashed(min(due))

    def _mark_crashed(self, proc: int) -> None:
        if proc in self.crashed:
            return
        self.crashed.add(proc)
        for op in self.ops:
            if op.proc == proc and op.status == "pending":
                op.status = "crashed-owner"
        # A crash marker is only informative once the process has acted.
        if proc in self.procs_with_events:
            self._emit(proc=proc, thread=-1, kind="crash")

    # -- threads -----------------------------------------------------------

    def _new_tid(self, proc: int) -> int:
        tid = self._tid_counters.get(proc, 0)
        self._tid_counters[proc] = tid + 1
        return tid

    def _enqueue(self, t: _Thread, randomize: bool = False) -> None:
        if randomize and self.queue:
            self.queue.insert(self.rng.randrange(len(self.queue) + 1), t)
        else:
            self.queue.append(t)

    def spawn_op(
        self,
        proc: int,
        kind: str,
        arg: Optional[Payload],
        gen: Generator,
        index: Optional[int] = None,
    ) -> OpResult:
        op = OpResult(index=index if index is not None else len(self.ops),
                      proc=proc, kind=kind, arg=arg)
        t = _Thread(proc, self._new_tid(proc), gen, op)
        self.threads[(proc, t.tid)] = t
        op.invoke_step = len(self.events)
        self._emit(proc=proc, thread=t.tid, kind="invoke", op=kind, arg=arg)
        self.ops.append(op)
        self._enqueue(t)
        return op

    def spawn_script(self, proc: int, gen: Generator) -> _Thread:
        t = _Thread(proc, self._new_tid(proc), gen, None)
        self.threads[(proc, t.tid)] = t
        self._enqueue(t)
        return t

    def _cancel_subtree(self, t: _Thread) -> None:
        t.cancelled = True
        for fr in t.child_frames:
            if not fr.resolved:
                fr.resolved = True
                for b in fr.branches:
                    self._cancel_subtree(b)

    def _stop_op_threads(self, op: OpResult) -> None:
        for t in self.threads.values():
            if t.op is op and not t.done:
                t.cancelled = True

    def _on_return(self, t: _Thread, value) -> None:
        t.done = True
        if t.frame is None:
            op = t.op
            if op is not None and op.status == "pending":
                op.status = "completed"
                op.ret = value
                op.respond_step = len(self.events)
                self._emit(
                    proc=t.owner, thread=t.tid, kind="respond", op=op.kind, ret=value
                )
            return
        fr = t.frame
        if fr.resolved:
            return
        if value is not None:
            fr.resolved = True
            for sib in fr.branches:
                if sib is not t:
                    self._cancel_subtree(sib)
            parent = fr.parent
            parent.parked = False
            parent.pending = value
            self._enqueue(parent)
        else:
            fr.dead += 1
            if fr.dead == len(fr.branches):
                fr.resolved = True
                parent = fr.parent
                parent.parked = False
                parent.pending = None
                self._enqueue(parent)

    def _resume(self, t: _Thread, per_op_budget: Optional[int] = None,
                randomize: bool = False) -> None:
        if t.owner in self.crashed:
            raise CrashedActor(f"process {t.owner} already crashed")
        if self.resumption_log is not None:
            self.resumption_log.append((t.owner, t.tid))
        val, t.pending = t.pending, None
        try:
            action = t.gen.send(val)
        except StopIteration as stop:
            self._on_return(t, stop.value)
            return
        kind = action[0]
        if kind == "r":
            value = self.registers.read(action[1], t.owner)
            self._emit(proc=t.owner, thread=t.tid, kind="reg_read",
                       reg=action[1], value=value)
            t.pending = value
            self._account(t, per_op_budget)
        elif kind == "w":
            self.registers.write(action[1], t.owner, action[2])
            self._emit(proc=t.owner, thread=t.tid, kind="reg_write",
                       reg=action[1], value=action[2])
            self._account(t, per_op_budget)
        elif kind == "fork":
            fr = _JoinFrame(t)
            for gen in action[1:]:
                b = _Thread(t.owner, self._new_tid(t.owner), gen, t.op)
                b.frame = fr
                fr.branches.append(b)
                self.threads[(t.owner, b.tid)] = b
            t.child_frames.append(fr)
            t.parked = True
            for b in fr.branches:
                self._enqueue(b, randomize=randomize)
            return
        else:
            raise RuntimeError(f"unknown machine action {action!r}")
        if t.runnable() and t.owner not in self.crashed and not self._op_stopped(t):
            self._enqueue(t)

    def _op_stopped(self, t: _Thread) -> bool:
        return t.op is not None and t.op.status != "pending"

    def _account(self, t: _Thread, per_op_budget: Optional[int]) -> None:
        self.access_count[t.owner] = self.access_count.get(t.owner, 0) + 1
        op = t.op
        if op is not None:
            op.steps += 1
            if per_op_budget is not None and op.steps >= per_op_budget and \
                    op.status == "pending":
                op.reason = "per-op budget"
                self._stop_op_threads(op)

    def _pop_runnable(self) -> Optional[_Thread]:
        while self.queue:
            t = self.queue.pop(0)
            if t.owner in self.crashed:
                continue
            if t.owner in self.crash_after_accesses and \
                    self.access_count.get(t.owner, 0) >= self.crash_after_accesses[t.owner]:
                self._mark_crashed(t.owner)
                continue
            if not t.runnable() or self._op_stopped(t):
                continue
            return t
        return None

    def run_queue(self, step_budget: int, per_op_budget: Optional[int] = None,
                  randomize: bool = False) -> None:
        """Drain runnable threads FIFO until quiescence or the event budget."""
        while len(self.events) < step_budget:
            self._sweep_crashes()
            t = self._pop_runnable()
            if t is None:
                return
            self._resume(t, per_op_budget=per_op_budget, randomize=randomize)

    def total_accesses(self) -> int:
        return sum(self.access_count.values())


# ---------------------------------------------------------------------------
# Scenario execution
# ---------------------------------------------------------------------------


def validate_scenario(s: Scenario) -> None:
    if s.n < 2:
        raise MalformedScenario("need at least two readers")
    procs = set(range(0, s.n + 1))
    if set(s.faults) - procs:
        raise MalformedScenario("fault map references undeclared processes")
    for i, item in enumerate(s.workload):
        if item.proc not in procs:
            raise MalformedScenario(f"workload[{i}] references process {item.proc}")
        if is_malicious(s.faults.get(item.proc, Correct())):
            raise MalformedScenario(
                f"workload[{i}]: malicious process {item.proc} may only act "
                "through its script"
            )
        if item.op == "write" and item.proc != 0:
            raise MalformedScenario(f"workload[{i}]: only the writer writes")
        if item.op == "read" and item.proc == 0:
            raise MalformedScenario(f"workload[{i}]: the writer does not read")
        if item.op not in ("write", "read"):
            raise MalformedScenario(f"workload[{i}]: unknown op {item.op!r}")
        if item.after_op is not None and not (0 <= item.after_op < i):
            raise MalformedScenario(f"workload[{i}]: after_op must name an earlier op")


def run(scenario: Scenario, instance: Optional[object] = None,
        record_resumptions: bool = False) -> Trace:
    """Execute a scenario to quiescence or budget and return its trace."""
    validate_scenario(scenario)
    seed = scenario.schedule.seed if isinstance(scenario.schedule, Seeded) else 0
    if instance is None:
        instance = constructions.build_instance(
            scenario.construction, scenario.n, SignatureOracle()
        )
    eng = Engine(instance.specs, oracle=instance.oracle, seed=seed,
                 record_resumptions=record_resumptions)

    for proc in sorted(scenario.faults):
        fault = scenario.faults[proc]
        if isinstance(fault, Crash):
            eng.crash_at[proc] = fault.at_global_step
    eng._sweep_crashes()
    # Malicious scripts run as plain threads from the start, in process order.
    for proc in sorted(scenario.faults):
        fault = scenario.faults[proc]
        if isinstance(fault, Malicious) and proc not in eng.crashed:
            eng.spawn_script(proc, fault.script.machine(eng.registers, proc))

    spawned = [False] * len(scenario.workload)
    op_for_item: dict[int, OpResult] = {}

    def resolved(op: OpResult) -> bool:
        return op.status != "pending" or op.reason is not None

    def last_op_of(proc: int) -> Optional[OpResult]:
        mine = [op_for_item[i] for i in op_for_item
                if scenario.workload[i].proc == proc]
        return mine[-1] if mine else None

    def spawn_eligible(quiescent: bool) -> bool:
        did = False
        for i, item in enumerate(scenario.workload):
            if spawned[i]:
                continue
            if item.proc in eng.crashed:
                spawned[i] = True
                op = OpResult(index=i, proc=item.proc,
                              kind="Write" if item.op == "write" else "Read",
                              arg=item.value, status="crashed-owner")
                eng.ops.append(op)
                op_for_item[i] = op
                continue
            prev = last_op_of(item.proc)
            if prev is not None and not resolved(prev):
                continue
            if item.after_op is not None:
                dep = op_for_item.get(item.after_op)
                if dep is None or not resolved(dep):
                    continue
            if item.after_step is not None and len(eng.events) < item.after_step \
                    and not quiescent:
                continue
            spawned[i] = True
            if item.op == "write":
                gen = instance.write_machine(item.value)
                op = eng.spawn_op(item.proc, "Write", item.value, gen, index=i)
            else:
                gen = instance.read_machine(item.proc)
                op = eng.spawn_op(item.proc, "Read", None, gen, index=i)
            op_for_item[i] = op
            did = True
        return did

    if isinstance(scenario.schedule, Seeded):
        while len(eng.events) < scenario.step_budget:
            eng._sweep_crashes()
            spawn_eligible(quiescent=False)
            t = eng._pop_runnable()
            if t is None:
                # Nothing runnable: pure after_step waits may now fire.
                if spawn_eligible(quiescent=True):
                    continue
                break
            eng._resume(t, per_op_budget=scenario.per_op_budget, randomize=True)
        exhausted = len(eng.events) >= scenario.step_budget
    else:
        for proc, tid in scenario.schedule.picks:
            eng._sweep_crashes()
            spawn_eligible(quiescent=False)
            t = eng.threads.get((proc, tid))
            if t is None or not t.runnable() or proc in eng.crashed or \
                    eng._op_stopped(t):
                raise MalformedScenario(
                    f"scripted pick ({proc},{tid}) is not runnable"
                )
            eng._resume(t, per_op_budget=scenario.per_op_budget)
            if len(eng.events) >= scenario.step_budget:
                break
        exhausted = False

    for op in eng.ops:
        if op.status == "pending" and op.reason is None:
            if isinstance(scenario.schedule, Scripted):
                op.reason = "schedule exhausted"
            else:
                op.reason = "step budget" if exhausted else "quiescence"

    meta = {
        "construction": scenario.construction,
        "n": scenario.n,
        "schedule": "seeded" if isinstance(scenario.schedule, Seeded) else "scripted",
        "seed": seed,
        "step_budget": scenario.step_budget,
        "per_op_budget": scenario.per_op_budget,
        "budget_exhausted": exhausted,
        "crashed": sorted(eng.crashed),
    }
    trace = Trace(events=eng.events, ops=sorted(eng.ops, key=lambda o: o.index),
                  meta=meta)
    if record_resumptions:
        trace.meta["resumptions"] = eng.resumption_log
    return trace


def inject_crash(engine: Engine, proc: int, at_step: int) -> None:
    """Schedule a crash: proc takes no step with index >= at_step."""
    if at_step < len(engine.events):
        raise ValueError("crash point already passed")
    engine.crash_at[proc] = at_step


# ---------------------------------------------------------------------------
# Scenario (de)serialization
# ---------------------------------------------------------------------------


def fault_to_json(f: FaultModel) -> dict:
    if isinstance(f, Correct):
        return {"kind": "correct"}
    if isinstance(f, Crash):
        return {"kind": "crash", "at_step": f.at_global_step}
    if isinstance(f, Malicious):
        return {"kind": "malicious", "script": f.script.to_json()}
    raise TypeError(f)


def fault_from_json(obj: dict) -> FaultModel:
    kind = obj["kind"]
    if kind == "correct":
        return Correct()
    if kind == "crash":
        return Crash(obj["at_step"])
    if kind == "malicious":
        from .adversary import script_from_json

        return Malicious(script_from_json(obj["script"]))
    raise MalformedScenario(f"unknown fault kind {kind!r}")


def scenario_to_json(s: Scenario) -> dict:
    return {
        "construction": s.construction,
        "n": s.n,
        "faults": {str(p): fault_to_json(f) for p, f in sorted(s.faults.items())},
        "workload": [
            {
                "proc": w.proc,
                "op": w.op,
                **({"value": encode_payload(w.value)} if w.value is not None else {}),
                **({"after_op": w.after_op} if w.after_op is not None else {}),
                **({"after_step": w.after_step} if w.after_step is not None else {}),
            }
            for w in s.workload
        ],
        "schedule": (
            {"kind": "seeded", "seed": s.schedule.seed}
            if isinstance(s.schedule, Seeded)
            else {"kind": "scripted", "picks": [list(p) for p in s.schedule.picks]}
        ),
        "step_budget": s.step_budget,
        "per_op_budget": s.per_op_budget,
    }


def scenario_from_json(obj: dict) -> Scenario:
    try:
        sched = obj["schedule"]
        if sched["kind"] == "seeded":
            schedule: Schedule = Seeded(sched["seed"])
        elif sched["kind"] == "scripted":
            schedule = Scripted(tuple((p, t) for p, t in sched["picks"]))
        else:
            raise MalformedScenario(f"unknown schedule kind {sched['kind']!r}")
        return Scenario(
            construction=obj["construction"],
            n=obj["n"],
            faults={int(p): fault_from_json(f) for p, f in obj.get("faults", {}).items()},
            workload=[
                WorkItem(
                    proc=w["proc"],
                    op=w["op"],
                    value=decode_payload(w["value"]) if "value" in w else None,
                    after_op=w.get("after_op"),
                    after_step=w.get("after_step"),
                )
                for w in obj.get("workload", [])
            ],
            schedule=schedule,
            step_budget=obj.get("step_budget", DEFAULT_STEP_BUDGET),
            per_op_budget=obj.get("per_op_budget", DEFAULT_PER_OP_BUDGET),
        )
    except (KeyError, TypeError) as exc:
        raise MalformedScenario(f"bad scenario document: {exc}") from exc


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_json(json.load(fh))
