"""Command-line front end: run a scenario, sweep seeds and fault patterns,
drive the attack harness, or re-check a stored trace.

Exit codes: 0 all checks pass (attack: search exhausted), 1 a violation or
witness was found, 2 usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys

from . import adversary, checker, constructions, sim
from .core import (
    Commit,
    Correct,
    Crash,
    Garbage,
    Malicious,
    MalformedScenario,
    Plain,
    Prepare,
    SeqTuple,
    Signed,
    events_from_jsonl,
    events_to_jsonl,
)

ENV_SEED = "BYZREGS_SEED"

CANONICAL_PATTERNS = [
    "all-correct",
    "writer-crash",
    "one-malicious-reader",
    "writer-crash+one-malicious-reader",
    "all-readers-malicious",
]
EXTRA_PATTERNS = ["malicious-writer", "majority-malicious-readers"]


# ---------------------------------------------------------------------------
# Seeded scenario generation
# ---------------------------------------------------------------------------


def _junk_cell(rng: random.Random, spec):
    roll = rng.randrange(5)
    k = rng.randint(0, 9)
    payload = bytes([rng.randrange(256) for _ in range(rng.randint(0, 3))])
    t = SeqTuple(k, payload)
    if roll == 0:
        return Garbage(payload)
    if roll == 1:
        return Plain(t)
    if roll == 2:
        return Commit(t)
    if roll == 3:
        return Prepare(t, SeqTuple(k + rng.randint(0, 2), payload))
    return Signed(t, spec.writer, "forged")


def random_script(rng: random.Random, specs, proc: int):
    """A small seeded mix of resets and lies over the registers proc owns."""
    own = [s for s in specs if s.writer == proc]
    if not own or rng.random() < 0.15:
        return adversary.Idle()
    items = []
    for _ in range(rng.randint(1, 4)):
        if rng.random() < 0.3:
            items.append(adversary.ResetAll())
        else:
            spec = rng.choice(own)
            items.append(adversary.LieValue(spec.reg_id, _junk_cell(rng, spec)))
    return adversary.Sequence(tuple(items))


def build_fault_map(pattern: str, n: int, rng: random.Random, specs):
    readers = list(range(1, n + 1))
    faults = {p: Correct() for p in [0] + readers}
    if pattern == "all-correct":
        pass
    elif pattern == "writer-crash":
        faults[0] = Crash(rng.randint(0, 40))
    elif pattern == "one-malicious-reader":
        r = rng.choice(readers)
        faults[r] = Malicious(random_script(rng, specs, r))
    elif pattern == "writer-crash+one-malicious-reader":
        faults[0] = Crash(rng.randint(0, 40))
        r = rng.choice(readers)
        faults[r] = Malicious(random_script(rng, specs, r))
    elif pattern == "all-readers-malicious":
        for r in readers:
            faults[r] = Malicious(random_script(rng, specs, r))
    elif pattern == "malicious-writer":
        faults[0] = Malicious(random_script(rng, specs, 0))
    elif pattern == "majority-malicious-readers":
        count = n // 2 + 1
        for r in rng.sample(readers, count):
            faults[r] = Malicious(random_script(rng, specs, r))
    else:
        raise MalformedScenario(f"unknown fault pattern {pattern!r}")
    return faults


def random_workload(rng: random.Random, n: int, faults) -> list[sim.WorkItem]:
    honest_readers = [
        r for r in range(1, n + 1) if not isinstance(faults[r], Malicious)
    ]
    items: list[sim.WorkItem] = []
    writer_honest = not isinstance(faults[0], Malicious)
    n_writes = rng.randint(1, 3) if writer_honest else 0
    for i in range(n_writes):
        items.append(sim.WorkItem(0, "write", value=f"v{i + 1}".encode()))
    if honest_readers:
        for _ in range(rng.randint(1, 4)):
            reader = rng.choice(honest_readers)
            item = sim.WorkItem(reader, "read")
            if items and rng.random() < 0.5:
                item.after_op = rng.randrange(len(items))
            items.append(item)
    # Interleave read starts with writes by shuffling the tail order; indices
    # referenced by after_op are remapped to the shuffled positions.
    order = list(range(len(items)))
    rng.shuffle(order)
    remap = {old: new for new, old in enumerate(order)}
    shuffled = [items[old] for old in order]
    for it in shuffled:
        if it.after_op is not None:
            it.after_op = remap[it.after_op]
        if it.after_op is not None and it.after_op >= shuffled.index(it):
            it.after_op = None  # constraint must point backwards
    return shuffled


def build_sweep_scenario(construction: str, n: int, pattern: str, seed: int,
                         step_budget: int, per_op_budget: int) -> sim.Scenario:
    rng = random.Random(seed)
    inst = constructions.build_instance(construction, n)
    faults = build_fault_map(pattern, n, rng, inst.specs)
    workload = random_workload(rng, n, faults)
    return sim.Scenario(
        construction=construction,
        n=n,
        faults=faults,
        workload=workload,
        schedule=sim.Seeded(seed),
        step_budget=step_budget,
        per_op_budget=per_op_budget,
    )


# ---------------------------------------------------------------------------
# Shared run/check plumbing
# ---------------------------------------------------------------------------


def build_any_instance(name: str, n: int):
    """Resolve a construction or a registered attack-harness candidate."""
    if name in constructions.CONSTRUCTIONS:
        return constructions.build_instance(name, n)
    if name in adversary.candidate_names():
        return adversary.build_candidate(name, n)
    raise MalformedScenario(f"unknown construction {name!r}")


def value_index_for(scenario: sim.Scenario):
    index = {constructions.U0: 0}
    k = 0
    for item in scenario.workload:
        if item.op == "write":
            k += 1
            index[item.value] = k
    return index


def _check_with_instance(trace: sim.Trace, scenario: sim.Scenario, inst):
    return checker.run_all_checks(
        trace,
        scenario.faults,
        specs={s.reg_id: s for s in inst.specs},
        classify=inst.classify,
        value_index=value_index_for(scenario),
    )


def check_trace(trace: sim.Trace, scenario: sim.Scenario):
    inst = build_any_instance(scenario.construction, scenario.n)
    return _check_with_instance(trace, scenario, inst)


def run_and_check(scenario: sim.Scenario):
    inst = build_any_instance(scenario.construction, scenario.n)
    trace = sim.run(scenario, instance=inst)
    verdicts = _check_with_instance(trace, scenario, inst)
    return trace, verdicts


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _verdicts_json(verdicts) -> dict:
    return {name: v.to_json() for name, v in verdicts.items()}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        scenario = sim.load_scenario(args.scenario)
        if args.seed is not None and isinstance(scenario.schedule, sim.Seeded):
            scenario.schedule = sim.Seeded(args.seed)
        if args.step_budget:
            scenario.step_budget = args.step_budget
        if args.op_budget:
            scenario.per_op_budget = args.op_budget
        trace, verdicts = run_and_check(scenario)
    except (OSError, json.JSONDecodeError, MalformedScenario) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except checker.UnfairScheduleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    with open(args.trace, "wb") as fh:
        fh.write(events_to_jsonl(trace.events))
    _write_json(args.out, _verdicts_json(verdicts))
    failed = [name for name, v in verdicts.items() if not v.ok]
    for name, v in sorted(verdicts.items()):
        print(f"{name}: {v.status}" + (f" ({v.explanation})" if v.explanation else ""))
    return 1 if failed else 0


def parse_n_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(text)]


def run_sweep(construction: str, ns, patterns, runs: int, base_seed: int,
              step_budget: int, per_op_budget: int) -> dict:
    summary = {
        "construction": construction,
        "runs": 0,
        "violations": {},
        "pending_outside_guarantee": 0,
        "per_pattern": {},
        "base_seed": base_seed,
    }
    run_index = 0
    for n in ns:
        for pattern in patterns:
            key = f"n={n}/{pattern}"
            bucket = summary["per_pattern"].setdefault(
                key, {"runs": 0, "violations": 0, "pending_outside_guarantee": 0}
            )
            for _ in range(runs):
                seed = base_seed + run_index
                run_index += 1
                scenario = build_sweep_scenario(
                    construction, n, pattern, seed, step_budget, per_op_budget
                )
                trace, verdicts = run_and_check(scenario)
                summary["runs"] += 1
                bucket["runs"] += 1
                for name, v in verdicts.items():
                    if not v.ok:
                        summary["violations"][v.vclass] = (
                            summary["violations"].get(v.vclass, 0) + 1
                        )
                        bucket["violations"] += 1
                    elif "outside guarantee" in v.explanation:
                        summary["pending_outside_guarantee"] += 1
                        bucket["pending_outside_guarantee"] += 1
    return summary


def cmd_sweep(args) -> int:
    try:
        ns = parse_n_range(args.n)
        patterns = args.faults.split(",")
        for p in patterns:
            if p not in CANONICAL_PATTERNS + EXTRA_PATTERNS:
                raise MalformedScenario(f"unknown fault pattern {p!r}")
        summary = run_sweep(
            args.construction,
            ns,
            patterns,
            args.runs,
            args.seed,
            args.step_budget or sim.DEFAULT_STEP_BUDGET,
            args.op_budget or sim.DEFAULT_PER_OP_BUDGET,
        )
    except (MalformedScenario, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _write_json(args.out, summary)
    total_viol = sum(summary["violations"].values())
    print(
        f"{summary['runs']} runs, {total_viol} violations, "
        f"{summary['pending_outside_guarantee']} pending outside guarantee"
    )
    return 1 if total_viol else 0


def cmd_attack(args) -> int:
    try:
        if args.construction not in adversary.candidate_names():
            raise ValueError(
                f"unknown candidate {args.construction!r}; "
                f"registered: {', '.join(adversary.candidate_names())}"
            )
        result = adversary.attack_search(
            args.construction,
            args.n_int,
            budget=args.step_budget or 10_000_000,
            stage_budget=args.op_budget or adversary.DEFAULT_STAGE_BUDGET,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if isinstance(result, adversary.Exhausted):
        _write_json(args.out, {"result": "exhausted", "reason": result.reason,
                               "stages": result.stage_log})
        print(f"exhausted: {result.reason}")
        return 0
    if isinstance(result, adversary.ViolationWitness):
        report = {
            "result": "violation",
            "stage": result.stage,
            "class": result.vclass,
            "explanation": result.explanation,
            "stages": result.stage_log,
        }
    else:
        report = {
            "result": "blocked",
            "stage": result.stage,
            "reader": result.reader,
            "explanation": result.explanation,
            "stages": result.stage_log,
        }
    _write_json(args.out, report)
    with open(args.trace, "wb") as fh:
        fh.write(events_to_jsonl(result.events))
    print(f"{report['result']} witness at stage {result.stage}")
    return 1


def cmd_check(args) -> int:
    try:
        scenario = sim.load_scenario(args.scenario)
        with open(args.trace, "rb") as fh:
            events = events_from_jsonl(fh.read())
        trace = _trace_from_events(events, scenario)
        verdicts = check_trace(trace, scenario)
    except (OSError, json.JSONDecodeError, MalformedScenario, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except checker.UnfairScheduleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _write_json(args.out, _verdicts_json(verdicts))
    failed = [name for name, v in verdicts.items() if not v.ok]
    for name, v in sorted(verdicts.items()):
        print(f"{name}: {v.status}")
    return 1 if failed else 0


def _trace_from_events(events, scenario: sim.Scenario) -> sim.Trace:
    """Rebuild operation statuses from a stored event stream."""
    ops: list[sim.OpResult] = []
    open_by_proc: dict[int, sim.OpResult] = {}
    for e in events:
        if e.kind == "invoke":
            op = sim.OpResult(index=len(ops), proc=e.proc, kind=e.op, arg=e.arg,
                              invoke_step=e.step)
            ops.append(op)
            open_by_proc[e.proc] = op
        elif e.kind == "respond":
            op = open_by_proc.pop(e.proc)
            op.status = "completed"
            op.respond_step = e.step
            op.ret = e.ret
    crashed = {p for p, f in scenario.faults.items() if isinstance(f, Crash)}
    for op in ops:
        if op.status == "pending":
            op.reason = "stored trace"
            if op.proc in crashed:
                op.status = "crashed-owner"
    meta = {
        "schedule": "seeded" if isinstance(scenario.schedule, sim.Seeded) else "scripted",
        "construction": scenario.construction,
        "n": scenario.n,
    }
    return sim.Trace(events=events, ops=ops, meta=meta)


# ---------------------------------------------------------------------------


def _default_seed() -> int:
    return int(os.environ.get(ENV_SEED, "0"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="byzregs",
        description="Simulate and adversarially test Byzantine register constructions",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario file and check it")
    run_p.add_argument("--scenario", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--step-budget", type=int, default=0)
    run_p.add_argument("--op-budget", type=int, default=0)
    run_p.add_argument("--trace", default="trace.jsonl")
    run_p.add_argument("--out", default="verdicts.json")
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="sweep seeds and fault patterns")
    sweep_p.add_argument("--construction", required=True)
    sweep_p.add_argument("--n", required=True, help="reader count, e.g. 3 or 2..5")
    sweep_p.add_argument("--runs", type=int, required=True)
    sweep_p.add_argument("--faults", default=",".join(CANONICAL_PATTERNS))
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--step-budget", type=int, default=0)
    sweep_p.add_argument("--op-budget", type=int, default=0)
    sweep_p.add_argument("--out", default="sweep.json")
    sweep_p.set_defaults(func=cmd_sweep)

    attack_p = sub.add_parser("attack", help="run the attack harness")
    attack_p.add_argument("--construction", required=True,
                          help="registered candidate name")
    attack_p.add_argument("--n", dest="n_int", type=int, required=True)
    attack_p.add_argument("--step-budget", type=int, default=0)
    attack_p.add_argument("--op-budget", type=int, default=0)
    attack_p.add_argument("--trace", default="witness.jsonl")
    attack_p.add_argument("--out", default="attack.json")
    attack_p.set_defaults(func=cmd_attack)

    check_p = sub.add_parser("check", help="re-run the checker on a stored trace")
    check_p.add_argument("--scenario", required=True)
    check_p.add_argument("--trace", required=True)
    check_p.add_argument("--out", default="verdicts.json")
    check_p.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    if args.command == "sweep":
        if args.seed is None:
            args.seed = _default_seed()
        if args.runs < 1:
            print("error: --runs must be at least 1", file=sys.stderr)
            return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
