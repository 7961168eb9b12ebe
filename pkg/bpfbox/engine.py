# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Deterministic execution of a loaded program in one of four modes:

    vanilla   the guest reaches kernel memory directly, no checks
    sfi       the program is rewritten with address masks, context copied
              into the sandbox
    mte       unrewritten program, context copied into the sandbox, every
              guest access tag checked
    mte-min   no context copy: the accessed kernel fields are tagged in
              place for the duration of the run
"""

from collections import namedtuple
from dataclasses import dataclass, field
from logging import getLogger
from typing import Dict, List, Optional

from bpfbox.analyze import check_and_analyze, require_constant_context
from bpfbox.context import (
    REFERENCE,
    SCALAR,
    UnresolvedPath,
    mte_min_restore,
    mte_min_tag_object,
    prepare_context,
    refresh_after_helper,
    sync_out,
    translate_for_helper,
)
from bpfbox.errors import BpfBoxError, GuestFault, HelperError, UnknownHelper, UnknownObject
from bpfbox import isa
from bpfbox.isa import Origin
from bpfbox.instrument import rewrite_sfi
from bpfbox.maps import MapError, map_update
from bpfbox.memory import GUEST, tag_of, untagged, with_tag
from bpfbox.utils import U32, U64

logger = getLogger()

MODES = ("vanilla", "sfi", "mte", "mte-min")
REJECTED_MODES = ("mte-async", "async-mte", "mte-asymm", "asymm-mte")
# modes that copy the context into the sandbox
SANDBOXED = ("sfi", "mte")
TAG_CHECKED = ("mte", "mte-min")

DEFAULT_STEP_BUDGET = 1000000
MAX_LOG_LEN = 256

HELPER_NAMES = {
    1: "map_lookup",
    2: "map_update",
    3: "trace_log",
    4: "get_time",
    5: "get_prandom",
    6: "ctx_store_u32",
}
DEFAULT_HELPER_COSTS = {1: 10, 2: 12, 3: 40, 4: 5, 5: 5, 6: 8}
CATEGORIES = ("program", "context", "tagging", "sandbox", "access")


class EngineError(BpfBoxError):
    pass


class UnsupportedMode(EngineError):
    pass


class StepBudgetExceeded(EngineError):
    pass


class NotRewritten(EngineError):
    pass


def check_mode(mode):
    if mode in REJECTED_MODES:
        raise UnsupportedMode("unsupported mode: %s (only synchronous tag checks)" % mode)
    if mode not in MODES:
        raise UnsupportedMode("unsupported mode: %s" % mode)
    return mode


@dataclass
class CostTable:
    """
    Abstract cost units. ctx_copy is charged per context byte copied in,
    written back, flushed before a helper or refreshed after one; ctx_alloc
    per nested heap copy, ctx_translate per helper object translation and
    tag_granule per granule tagged or untagged.
    """

    alu: int = 1
    mem: int = 3
    tag_load_analog: int = 3
    address_form: int = 0
    stack_switch: int = 2
    sandbox_setup: int = 8
    ctx_copy: int = 1
    ctx_alloc: int = 4
    ctx_translate: int = 2
    tag_granule: int = 2
    helpers: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_HELPER_COSTS))

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        helpers = dict(DEFAULT_HELPER_COSTS)
        helpers.update({int(k): v for k, v in d.pop("helpers", {}).items()})
        return cls(helpers=helpers, **d)

    def helper(self, helper_id):
        return self.helpers.get(helper_id, 0)


@dataclass
class CostBreakdown:
    program: int = 0
    context: int = 0
    tagging: int = 0
    sandbox: int = 0
    access: int = 0

    @property
    def total(self):
        return self.program + self.context + self.tagging + self.sandbox + self.access

    def add(self, category, units):
        setattr(self, category, getattr(self, category) + units)

    def as_dict(self):
        d = {c: getattr(self, c) for c in CATEGORIES}
        d["total"] = self.total
        return d


TraceEntry = namedtuple("TraceEntry", ["pc", "kind", "addr", "width", "tag", "origin"])


@dataclass
class RunResult:
    r0: int = 0
    status: str = "completed"
    fault: Optional[dict] = None
    log: List[bytes] = field(default_factory=list)
    cost: CostBreakdown = field(default_factory=CostBreakdown)
    steps: int = 0
    counters: Dict[str, int] = field(default_factory=dict)
    context: Optional[dict] = None
    tagging: Optional[dict] = None
    trace: List[TraceEntry] = field(default_factory=list)
    pcs: List[int] = field(default_factory=list)

    @property
    def faulted(self):
        return self.status == "faulted"

    def as_dict(self):
        d = {
            "r0": self.r0,
            "status": self.status,
            "fault": self.fault,
            "log": [entry.hex() for entry in self.log],
            "cost": self.cost.as_dict(),
            "steps": self.steps,
            "counters": dict(self.counters),
        }
        if self.context is not None:
            d["context"] = self.context
        if self.tagging is not None:
            d["tagging"] = self.tagging
        return d


@dataclass
class Loaded:
    """A program ready to run: what executes, what was analyzed, and where."""
    program: isa.Program
    source: isa.Program
    analysis: tuple
    mode: str
    core_id: int = 0
    report: Optional[dict] = None


def load(program, world, mode, core_id=0):
    check_mode(mode)
    analysis = check_and_analyze(program, world.analysis_env())
    if mode in ("vanilla", "mte-min"):
        require_constant_context(analysis)
    exec_program, report = program, None
    if mode == "sfi":
        exec_program, report = rewrite_sfi(program, analysis, world.components(core_id))
    return Loaded(exec_program, program, analysis, mode, core_id, report)


class Engine(object):
    """One logical core executing programs against a world."""

    def __init__(self, world, mode=None, core_id=0, step_budget=DEFAULT_STEP_BUDGET,
                 copy_mode="partial", trace=False):
        self.world = world
        self.mode = check_mode(mode or world.mode)
        if self.mode != world.mode:
            raise EngineError("world was built for %s, not %s" % (world.mode, self.mode))
        self.core_id = core_id
        self.step_budget = step_budget
        self.copy_mode = copy_mode
        self.trace = trace
        self.costs = world.costs
        self.policy = world.policy
        self.regs = [0] * isa.NUM_REGS

    def load(self, program):
        return load(program, self.world, self.mode, self.core_id)

    # ============ run ... ============

    def run(self, loaded):
        if isinstance(loaded, isa.Program):
            loaded = self.load(loaded)
        if loaded.mode != self.mode:
            raise EngineError("program was loaded for %s, not %s" % (loaded.mode, self.mode))
        if self.mode == "sfi":
            if not loaded.program.is_rewritten():
                raise NotRewritten("sfi mode runs rewritten programs only")
            if loaded.core_id != self.core_id:
                raise EngineError("program was rewritten for core %i" % loaded.core_id)

        self.result = RunResult(counters={
            "guest_accesses": 0,
            "access_checks": 0,
            "tag_load_analogs": 0,
            "helper_calls": 0,
            "sandbox_markers": 0,
        })
        self.regs = [0] * isa.NUM_REGS
        self.sb, self.table, self.receipt = None, None, None
        host_frame = self.world.kernel_stack_top(self.core_id)
        try:
            self._setup(loaded, host_frame)
            try:
                self._execute(loaded)
            except GuestFault as fault:
                self.result.status = "faulted"
                self.result.fault = fault.record()
                logger.debug("%s faulted in %s: %s" % (loaded.source.name or "program", self.mode, fault))
            self._leave(host_frame)
            if self.result.fault is None and self.table is not None:
                moved = self.table.bytes_moved
                sync_out(self.sb, self.table)
                moved = self.table.bytes_moved - moved
                self.result.cost.add("context", moved * self.costs.ctx_copy)
        finally:
            self._teardown()
        if self.table is not None:
            self.result.context = self.table.report()
        return self.result

    def _setup(self, loaded, host_frame):
        world, mode, cost = self.world, self.mode, self.result.cost
        if mode != "vanilla":
            self.sb = world.pool.acquire(self.core_id, mode)
            cost.add("sandbox", self.costs.sandbox_setup)

        ctx = 0
        if world.root is not None:
            access_set = loaded.analysis.access_set
            if mode in SANDBOXED:
                ctx, self.table = prepare_context(
                    self.sb, world.objects, world.root, world.spec, access_set, self.copy_mode
                )
                cost.add("context", self.table.bytes_moved * self.costs.ctx_copy
                         + self.table.allocations * self.costs.ctx_alloc)
            elif mode == "mte-min":
                self.receipt = mte_min_tag_object(
                    world.space, world.objects, world.root, world.spec, access_set, world.tag_pool
                )
                cost.add("tagging", self.receipt.granules_tagged * self.costs.tag_granule)
                self.result.tagging = self.receipt.as_dict()
                ctx = with_tag(world.root.addr, self.receipt.tag)
            else:
                ctx = world.root.addr
        self.regs[1] = ctx

        if self.sb is not None:
            self.regs[isa.FRAME_REG] = self.sb.enter(host_frame)
            cost.add("sandbox", self.costs.stack_switch)
        else:
            self.regs[isa.FRAME_REG] = host_frame

    def _leave(self, host_frame):
        if self.sb is None or not self.sb.entered:
            return
        restored = self.sb.exit()
        self.result.cost.add("sandbox", self.costs.stack_switch)
        if restored != host_frame:
            raise EngineError("saved stack register was corrupted: 0x%x" % restored)

    def _teardown(self):
        if self.receipt is not None:
            restored = mte_min_restore(self.world.space, self.receipt, self.world.tag_pool)
            self.result.cost.add("tagging", restored * self.costs.tag_granule)
            self.receipt = None
        if self.sb is not None:
            if self.sb.entered:
                self.sb.exit()
            self.world.pool.release(self.sb)
            self.result.cost.add("sandbox", self.costs.sandbox_setup)

    # ============ interpreter loop ... ============

    def _charge(self, insn, origin):
        cost, costs, counters = self.result.cost, self.costs, self.result.counters
        if origin is Origin.ACCESS_CHECK:
            cost.add("access", costs.alu)
            counters["access_checks"] += 1
        elif origin is Origin.ADDRESS_FORM:
            cost.add("program", costs.address_form)
        elif origin is Origin.SANDBOX:
            cost.add("sandbox", costs.alu)
            counters["sandbox_markers"] += 1
        elif isa.is_mem(insn.opcode):
            cost.add("program", costs.mem)
        elif isa.is_call(insn.opcode):
            cost.add("program", costs.helper(insn.imm))
        else:
            cost.add("program", costs.alu)

    def _execute(self, loaded):
        program = loaded.program
        regs = self.regs
        conversions = {}
        if self.mode in ("vanilla", "mte-min"):
            conversions = {pc: a for pc, a in loaded.analysis.access_set.accesses.items()
                           if a.level is not None}
        n = len(program)
        pc = 0
        while True:
            if not 0 <= pc < n:
                raise EngineError("control left the program at pc %i" % pc)
            if self.result.steps >= self.step_budget:
                raise StepBudgetExceeded("step budget of %i exhausted" % self.step_budget)
            self.result.steps += 1
            insn = program.instructions[pc]
            origin = program.insn_origin[pc]
            op = insn.opcode
            if self.trace:
                self.result.pcs.append(pc)
            self._charge(insn, origin)
            try:
                if isa.is_alu(op):
                    wide = isa.insn_class(op) == isa.BPF_ALU64
                    src = regs[insn.src] if op & isa.BPF_X else isa.imm_operand(insn)
                    regs[insn.dst] = isa.alu_compute(isa.alu_name(op), regs[insn.dst], src, wide)
                elif isa.is_mem(op):
                    self._memory(pc, insn, origin, conversions.get(pc))
                elif isa.is_call(op):
                    regs[0] = self.call_helper(insn.imm, regs[1:6]) & U64
                    for r in range(1, 6):
                        regs[r] = 0
                elif isa.is_exit(op):
                    self.result.r0 = regs[0]
                    return
                else:
                    if op & 0xF0 == isa.BPF_JA:
                        taken = True
                    else:
                        src = regs[insn.src] if op & isa.BPF_X else isa.imm_operand(insn)
                        taken = isa.jump_taken(isa.jump_name(op), regs[insn.dst], src)
                    if taken:
                        pc += insn.off
            except GuestFault as fault:
                if fault.pc is None:
                    fault.pc = pc
                raise
            pc += 1

    def _convert(self, access, insn, base_value, store):
        """Kernel address a context access is converted to, None for a dropped store."""
        f = access.ctx_field
        obj = self.world.objects.by_addr(untagged(base_value) - (access.off - insn.off))
        if obj is None:
            raise UnknownObject("context pointer 0x%x names no kernel object" % base_value,
                                addr=base_value)
        try:
            kaddr, _ = self.world.objects.resolve(obj, f.path)
        except UnresolvedPath as e:
            raise UnknownObject(str(e), addr=base_value)
        if store and not f.writable:
            return None
        addr = kaddr + (access.off - f.ctx_offset)
        if self.mode == "mte-min":
            addr = with_tag(addr, tag_of(base_value))
        return addr

    def _memory(self, pc, insn, origin, access):
        regs, space, counters = self.regs, self.world.space, self.result.counters
        width = isa.mem_width(insn.opcode)
        store = isa.is_store(insn.opcode)
        base_value = regs[isa.mem_base(insn)]
        if access is not None:
            addr = self._convert(access, insn, base_value, store)
        else:
            addr = (base_value + insn.off) & U64

        counters["guest_accesses"] += 1
        if self.mode in TAG_CHECKED:
            self.result.cost.add("access", self.costs.tag_load_analog)
            counters["tag_load_analogs"] += 1
        if self.trace and addr is not None:
            self.result.trace.append(TraceEntry(
                pc, "store" if store else "load", untagged(addr), width, tag_of(addr), origin.value))

        if store:
            if addr is None:
                return
            if isa.insn_class(insn.opcode) == isa.BPF_STX:
                value = regs[insn.src]
            else:
                value = isa.sign_extend_imm(insn.imm)
            space.write(addr, width, value, self.policy, GUEST)
            if self.table is not None:
                self.table.mark_dirty(addr, width)
            return
        value = space.read(addr, width, self.policy, GUEST)
        if access is not None and access.ctx_field.kind == REFERENCE and self.mode == "mte-min":
            value = with_tag(value, tag_of(base_value))
        regs[insn.dst] = value

    # ============ helpers ... ============

    def call_helper(self, helper_id, args):
        if helper_id not in self.world.helpers_enabled or helper_id not in HELPER_NAMES:
            raise UnknownHelper("helper %i is not available" % helper_id)
        self.result.counters["helper_calls"] += 1
        body = getattr(self, "_helper_" + HELPER_NAMES[helper_id])
        return body(*args)

    def _buffer(self, addr, length):
        """Bytes of a guest buffer passed to a helper, read as the kernel."""
        a = untagged(addr)
        world = self.world
        ok = world.maps.find(a, length) is not None
        if self.sb is not None:
            ok = ok or self.sb.in_guest(a, length)
        else:
            ok = ok or world.kernel_stack_contains(self.core_id, a, length)
        if self.mode in ("vanilla", "mte-min"):
            obj = world.object_containing(a, length)
            ok = ok or obj is not None
        if not ok:
            raise HelperError("helper buffer 0x%x+%i is outside the program's memory" % (addr, length),
                              addr=addr)
        return world.space.read_bytes(a, length)

    def _map(self, map_id):
        try:
            return self.world.maps.get(map_id)
        except MapError as e:
            raise HelperError(str(e))

    def _helper_map_lookup(self, map_id, index, *_):
        return self._map(map_id).lookup(index)

    def _helper_map_update(self, map_id, index, src, *_):
        desc = self._map(map_id)
        return map_update(desc, index, self._buffer(src, desc.value_size))

    def _helper_trace_log(self, addr, length, *_):
        if not 1 <= length <= MAX_LOG_LEN:
            raise HelperError("trace_log length %i outside 1..%i" % (length, MAX_LOG_LEN))
        self.result.log.append(self._buffer(addr, length))
        return length

    def _helper_get_time(self, *_):
        return self.world.clock.tick()

    def _helper_get_prandom(self, *_):
        return self.world.prandom()

    def _helper_ctx_store_u32(self, obj_ptr, ctx_offset, value, *_):
        world, cost, costs = self.world, self.result.cost, self.costs
        if self.table is not None:
            moved = self.table.bytes_moved
            translate_for_helper(self.table, obj_ptr)
            cost.add("context", costs.ctx_translate + (self.table.bytes_moved - moved) * costs.ctx_copy)
            t = self.table.lookup(obj_ptr)
            obj, level = t.kernel_object, t.level
        else:
            entry = world.levels.get(untagged(obj_ptr))
            if entry is None:
                raise UnknownObject("0x%x is not a context object" % obj_ptr, addr=obj_ptr)
            obj, level = entry
        f = world.spec.field_at(level, ctx_offset, 4)
        if f is None or f.kind != SCALAR or f.size != 4 or not f.writable:
            raise HelperError("ctx offset %i is not a writable 4-byte field" % ctx_offset)
        kaddr, _ = world.objects.resolve(obj, f.path)
        world.space.write(kaddr, 4, value & U32)
        if self.table is not None:
            moved = self.table.bytes_moved
            refresh_after_helper(self.table, obj_ptr)
            cost.add("context", (self.table.bytes_moved - moved) * costs.ctx_copy)
        return 0


def run(program, mode, world, core_id=0, step_budget=DEFAULT_STEP_BUDGET, copy_mode="partial",
        trace=False):
    """Load (when given a bare Program) and execute on a fresh engine."""
    engine = Engine(world, mode, core_id, step_budget=step_budget, copy_mode=copy_mode, trace=trace)
    return engine.run(program)
