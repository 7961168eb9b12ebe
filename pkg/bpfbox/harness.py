# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Experiments over built worlds: fault-injection campaigns, the
microbenchmark cost table, the full-vs-partial context comparison and the
transparency oracle.
"""

import dataclasses
from collections import namedtuple
from dataclasses import dataclass, field
from logging import getLogger
from typing import Dict, List

import numpy as np
import pandas as pd

from bpfbox.analyze import STACK, Access, AccessSet, Analysis, LoadError, check_and_analyze
from bpfbox.engine import CATEGORIES, MODES, Engine, Loaded, check_mode, load
from bpfbox.errors import BpfBoxError
from bpfbox import isa
from bpfbox.isa import Origin
from bpfbox.instrument import MASK_REG, SCRATCH, materialize, relocate, rewrite_sfi
from bpfbox.reference import run_reference
from bpfbox.scenario import build_world
from bpfbox.synth import synthesize
from bpfbox.utils import AverageMeter, U64

logger = getLogger()

OUTCOMES = ("redirected", "faulted", "escaped")
TARGET_MODES = ("uniform", "sentinel")
# clearance kept around every component when drawing targets
EDGE_BUFFER = 16
SECRET_WINDOW = 4
MAX_DRAWS = 10000


class HarnessError(BpfBoxError):
    pass


TrialRecord = namedtuple(
    "TrialRecord",
    ["trial", "pc_inserted", "kind", "width", "target_addr", "outcome", "fault_kind"],
)


@dataclass
class InjectionReport:
    program: str
    mode: str
    seed: int
    trials: int = 0
    contained: int = 0
    escapes: int = 0
    outcomes: Dict[str, int] = field(default_factory=lambda: {o: 0 for o in OUTCOMES})
    fault_kinds: Dict[str, int] = field(default_factory=dict)
    records: List[TrialRecord] = field(default_factory=list)
    secret_leaked: bool = False
    arena_digest_match: bool = True

    def add(self, record, digest_match, leaked):
        self.records.append(record)
        self.trials += 1
        self.outcomes[record.outcome] += 1
        if record.outcome == "escaped":
            self.escapes += 1
        else:
            self.contained += 1
        if record.fault_kind is not None:
            self.fault_kinds[record.fault_kind] = self.fault_kinds.get(record.fault_kind, 0) + 1
        self.secret_leaked = self.secret_leaked or leaked
        self.arena_digest_match = self.arena_digest_match and digest_match

    def as_dict(self, records=False):
        d = {
            "program": self.program,
            "mode": self.mode,
            "seed": self.seed,
            "trials": self.trials,
            "contained": self.contained,
            "escapes": self.escapes,
            "outcomes": dict(self.outcomes),
            "fault_kinds": dict(self.fault_kinds),
            "secret_leaked": self.secret_leaked,
            "arena_digest_match": self.arena_digest_match,
        }
        if records:
            d["records"] = [r._asdict() for r in self.records]
        return d

    def to_frame(self):
        return pd.DataFrame(self.records, columns=TrialRecord._fields)


# ============ fault injection ... ============

def injection_sequence(kind, width, target, canary=0):
    """
    An access to `target` built from the frame register: the tag bits of r10
    are kept, everything below them replaced by the target address.
    """
    seq = [
        isa.alu64_reg("mov", MASK_REG, isa.FRAME_REG),
        isa.alu64_imm("rsh", MASK_REG, 56),
        isa.alu64_imm("lsh", MASK_REG, 56),
    ]
    seq += materialize(SCRATCH, target)
    seq.append(isa.alu64_reg("or", MASK_REG, SCRATCH))
    if kind == "load":
        seq.append(isa.ldx(width, 0, MASK_REG, 0))
    else:
        seq.append(isa.st_imm(width, MASK_REG, 0, canary))
    return [(insn, Origin.INJECTED) for insn in seq]


def insert_injection(program, analysis, pc, sequence):
    """
    Insert `sequence` before `pc`. Returns the new program and the analysis
    carried over to it, with the injected access classified as private.
    """
    injected, new_pc = relocate(program, {pc: sequence})
    accesses = {new_pc[old]: dataclasses.replace(a, pc=new_pc[old])
                for old, a in analysis.access_set.accesses.items()}
    last = sequence[-1][0]
    inj_pc = new_pc[pc] - 1
    accesses[inj_pc] = Access(inj_pc, "load" if isa.is_load(last.opcode) else "store",
                              isa.mem_width(last.opcode), STACK)
    access_set = AccessSet(accesses, analysis.access_set.reads, analysis.access_set.writes,
                           analysis.access_set.variable)
    return injected, Analysis(None, access_set), inj_pc


def _near(addr, width, ranges):
    for start, size in ranges:
        if addr < start + size + EDGE_BUFFER and start - EDGE_BUFFER < addr + width:
            return True
    return False


def pick_target(world, rng, width, targets="uniform"):
    """An aligned address outside every component of the world."""
    secret, secret_len = world.secret
    # one draw in eight aims straight at the secret
    if targets == "sentinel" or rng.rand() < 0.125:
        return secret + width * int(rng.randint(secret_len // width))
    excluded = world.target_exclusions()
    space = world.space
    for _ in range(MAX_DRAWS):
        addr = space.base + width * int(rng.randint((space.size - width) // width))
        if not _near(addr, width, excluded):
            return addr
    raise HarnessError("no injection target left outside the components of %s" % world.name)


def secret_in(world, result):
    """True when a window of the secret shows up in r0, the log or any map."""
    secret = world.secret_bytes()
    blob = b"".join(
        [(result.r0 & U64).to_bytes(8, "little")]
        + list(result.log)
        + [d.contents() for d in world.maps]
    )
    return any(secret[i:i + SECRET_WINDOW] in blob
               for i in range(len(secret) - SECRET_WINDOW + 1))


def classify(world, result, clean_digest):
    digest_match = world.digest() == clean_digest
    leaked = secret_in(world, result)
    if not digest_match or leaked:
        outcome = "escaped"
    elif result.faulted:
        outcome = "faulted"
    else:
        outcome = "redirected"
    return outcome, digest_match, leaked


def inject_faults(program, world, trials, seed, targets="uniform", core_id=0, log_every=1000,
                  stats=None):
    """
    Run `trials` copies of `program`, each with one out-of-bounds load or
    store inserted before a randomly chosen executed instruction, and
    classify what the enforcement of `world.mode` made of it.
    """
    mode = check_mode(world.mode)
    if targets not in TARGET_MODES:
        raise HarnessError("unknown target distribution %r" % targets)
    rng = np.random.RandomState(seed)
    analysis = check_and_analyze(program, world.analysis_env())
    clean = run_reference(program, world.clone())
    if clean.status != "completed":
        raise HarnessError("%s does not run cleanly: %s" % (program.name, clean.fault))
    executed = sorted(set(clean.pcs))
    clean_digest = world.digest()

    report = InjectionReport(program.name or "program", mode, seed)
    for trial in range(trials):
        pc = executed[rng.randint(len(executed))]
        kind = "load" if rng.rand() < 0.5 else "store"
        width = isa.WIDTHS[("b", "h", "w", "dw")[rng.randint(4)]]
        w = world.clone()
        target = pick_target(w, rng, width, targets)
        canary = int(rng.randint(1, 1 << 31))
        injected, inj_analysis, _ = insert_injection(
            program, analysis, pc, injection_sequence(kind, width, target, canary)
        )
        exec_program = injected
        if mode == "sfi":
            exec_program, _ = rewrite_sfi(injected, inj_analysis, w.components(core_id))
        loaded = Loaded(exec_program, injected, inj_analysis, mode, core_id)
        result = Engine(w, mode, core_id).run(loaded)

        outcome, digest_match, leaked = classify(w, result, clean_digest)
        record = TrialRecord(trial, pc, kind, width, target, outcome,
                             result.fault["kind"] if result.fault else None)
        report.add(record, digest_match, leaked)
        if stats is not None:
            stats.update(record._asdict(), save=False)
        if log_every and (trial + 1) % log_every == 0:
            logger.info("%s/%s: trial %i/%i, contained %i, escapes %i"
                        % (report.program, mode, trial + 1, trials, report.contained, report.escapes))
    logger.info("injection %s/%s seed %i: %i/%i contained, outcomes %s"
                % (report.program, mode, seed, report.contained, report.trials, report.outcomes))
    return report


# ============ benchmarks ... ============

BENCH_COLUMNS = (
    ["scenario", "program", "mode"]
    + list(CATEGORIES)
    + ["total", "steps", "guest_accesses", "access_checks", "tag_load_analogs",
       "static_checks", "guarded_accesses"]
)


def run_programs(world, copy_mode="partial"):
    """Run every program of the world's scenario in order, on one clone."""
    w = world.clone()
    out = []
    for program, core in world.load_programs():
        loaded = load(program, w, w.mode, core)
        result = Engine(w, w.mode, core, copy_mode=copy_mode).run(loaded)
        out.append((program, loaded, result))
    return out


def run_microbench(configs, modes=MODES, repetitions=1, copy_mode="partial", stats=None):
    """Mean cost per category for every program x mode."""
    rows = []
    for config in configs:
        for mode in modes:
            world = build_world(config, mode)
            meters, static = {}, {}
            for _ in range(repetitions):
                for program, loaded, result in run_programs(world, copy_mode):
                    m = meters.setdefault(program.name, {c: AverageMeter() for c in BENCH_COLUMNS[3:13]})
                    cost = result.cost.as_dict()
                    for c in CATEGORIES + ("total",):
                        m[c].update(cost[c])
                    m["steps"].update(result.steps)
                    for c in ("guest_accesses", "access_checks", "tag_load_analogs"):
                        m[c].update(result.counters[c])
                    static[program.name] = (
                        loaded.program.count(Origin.ACCESS_CHECK),
                        loaded.report["guarded_accesses"] if loaded.report else 0,
                    )
            for name, m in meters.items():
                row = {"scenario": config.get("name"), "program": name, "mode": mode}
                row.update({c: m[c].avg for c in m})
                row["static_checks"], row["guarded_accesses"] = static[name]
                rows.append(row)
                if stats is not None:
                    stats.update(row, save=False)
                logger.info("bench %s/%s: total %.1f" % (name, mode, row["total"]))
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)


def compare_context(config, mode="sfi"):
    """Fields copied and context cost of partial against full copying."""
    world = build_world(config, mode)
    rows = []
    runs = {m: run_programs(world, m) for m in ("partial", "full")}
    for (program, _, partial), (_, _, full) in zip(runs["partial"], runs["full"]):
        rows.append({
            "scenario": config.get("name"),
            "program": program.name,
            "fields_partial": partial.context["copied_in"],
            "fields_full": full.context["copied_in"],
            "bytes_partial": partial.context["bytes_moved"],
            "bytes_full": full.context["bytes_moved"],
            "context_partial": partial.cost.context,
            "context_full": full.cost.context,
        })
    return pd.DataFrame(rows)


# ============ transparency ... ============

@dataclass
class TransparencyReport:
    programs: int = 0
    runs: int = 0
    disagreements: List[dict] = field(default_factory=list)

    @property
    def agreed(self):
        return not self.disagreements

    def as_dict(self):
        return {"programs": self.programs, "runs": self.runs,
                "disagreements": list(self.disagreements)}


def observe(world, r0, status, log):
    return {
        "r0": r0,
        "status": status,
        "log": [bytes(entry) for entry in log],
        "maps": {d.map_id: d.contents() for d in world.maps},
        "objects": {o.name: world.space.read_bytes(o.addr, o.size) for o in world.objects},
    }


def verify_transparency(configs, programs, seed, modes=MODES):
    """
    Run seeded in-bounds programs under the reference interpreter and every
    mode; every observable outcome must agree.
    """
    report = TransparencyReport()
    for config in configs:
        worlds = {mode: build_world(config, mode) for mode in modes}
        base = worlds[modes[0]]
        for i in range(programs):
            pseed = seed * 1000003 + i
            program = synthesize(base, pseed)
            report.programs += 1
            ref_world = base.clone()
            ref = run_reference(program, ref_world)
            expected = observe(ref_world, ref.r0, ref.status, ref.log)
            if ref.out_of_bounds:
                report.disagreements.append({"scenario": config.get("name"), "seed": pseed,
                                             "mode": "reference", "key": "in_bounds"})
            for mode in modes:
                w = worlds[mode].clone()
                try:
                    result = Engine(w, mode).run(program)
                except LoadError as e:
                    report.disagreements.append({"scenario": config.get("name"), "seed": pseed,
                                                 "mode": mode, "key": "load", "error": str(e)})
                    continue
                report.runs += 1
                got = observe(w, result.r0, result.status, result.log)
                for key in expected:
                    if got[key] != expected[key]:
                        report.disagreements.append({"scenario": config.get("name"),
                                                     "seed": pseed, "mode": mode, "key": key})
    logger.info("transparency: %i programs, %i runs, %i disagreements"
                % (report.programs, report.runs, len(report.disagreements)))
    return report


def render_table(frame):
    if frame.empty:
        return ""
    return frame.to_string(index=False)
