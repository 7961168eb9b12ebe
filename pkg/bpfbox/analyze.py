# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Loader checks and register provenance.

A single forward pass in pc order: jumps only go forward, so every
predecessor of a pc has been visited before the pc itself and no fixpoint
iteration is needed. Each load/store is classified by the component its
base register points into; constant-offset context accesses accumulate into
the AccessSet that drives partial context copies.
"""

from collections import namedtuple
from dataclasses import dataclass, field
from logging import getLogger
from typing import Dict, List, Optional, Set, Tuple

from bpfbox.context import REFERENCE, ROOT
from bpfbox.errors import BpfBoxError
from bpfbox import isa
from bpfbox.sandbox import STACK_SIZE
from bpfbox.utils import to_signed

logger = getLogger()

SCALAR = "scalar"
CTX = "ctx"
STACK = "stack"
HEAP = "heap"
MAP = "map"
UNKNOWN = "unknown"
POINTER_KINDS = (CTX, STACK, HEAP, MAP)

HELPER_MAP_LOOKUP = 1
HELPER_MAP_UPDATE = 2
HELPER_TRACE_LOG = 3


class LoadError(BpfBoxError):
    def __init__(self, message, pc=None):
        if pc is not None:
            message = "pc %i: %s" % (pc, message)
        super(LoadError, self).__init__(message)
        self.pc = pc


class TooManyInstructions(LoadError):
    pass


class EmptyProgram(LoadError):
    pass


class BackwardJump(LoadError):
    pass


class JumpOutOfRange(LoadError):
    pass


class FallOffEnd(LoadError):
    pass


class UnreachableInstruction(LoadError):
    pass


class ReservedRegister(LoadError):
    pass


class FrameRegisterWrite(LoadError):
    pass


class PointerPlusPointer(LoadError):
    pass


class UnknownBaseAccess(LoadError):
    pass


class InvalidContextAccess(LoadError):
    pass


class StackOutOfBounds(LoadError):
    pass


class PointerLeak(LoadError):
    pass


class VariableContextOffset(LoadError):
    pass


@dataclass(frozen=True)
class Prov:
    kind: str
    # constant offset of a pointer, or constant value of a scalar
    off: Optional[int] = None
    # map id or nested context level
    ident: object = None

    @property
    def is_pointer(self):
        return self.kind in POINTER_KINDS

    def shifted(self, delta):
        if self.off is None or delta is None:
            return Prov(self.kind, None, self.ident)
        return Prov(self.kind, self.off + delta, self.ident)

    def __str__(self):
        names = {SCALAR: "Scalar", CTX: "CtxPtr", STACK: "StackPtr", HEAP: "HeapPtr",
                 MAP: "MapValuePtr", UNKNOWN: "Unknown"}
        text = names[self.kind]
        if self.ident is not None:
            text += "(%s)" % self.ident
        if self.off is not None:
            text += "(%#x)" % self.off if self.kind == SCALAR else "(%+d)" % self.off
        return text


SCALAR_ANY = Prov(SCALAR)
UNKNOWN_PROV = Prov(UNKNOWN)


def join(a, b):
    if a == b:
        return a
    if a.kind == b.kind == SCALAR:
        return SCALAR_ANY
    # unequal pointers never merge, not even within one region
    return UNKNOWN_PROV


@dataclass(frozen=True)
class State:
    regs: Tuple[Prov, ...]
    # spilled non-scalar values by 8-byte stack slot; absent slots hold data
    spills: Tuple[Tuple[int, Prov], ...] = ()

    def with_reg(self, reg, prov):
        regs = list(self.regs)
        regs[reg] = prov
        return State(tuple(regs), self.spills)

    def spill_map(self):
        return dict(self.spills)


def _join_states(a, b):
    if a is None:
        return b
    regs = tuple(join(x, y) for x, y in zip(a.regs, b.regs))
    sa, sb = a.spill_map(), b.spill_map()
    spills = {}
    for off in set(sa) | set(sb):
        x, y = sa.get(off), sb.get(off)
        spills[off] = x if x == y else UNKNOWN_PROV
    return State(regs, tuple(sorted(spills.items())))


@dataclass
class Access:
    pc: int
    kind: str
    width: int
    region: str
    # effective offset into the region, None when not constant
    off: Optional[int] = None
    ident: object = None
    ctx_field: object = None

    @property
    def component(self):
        if self.region == MAP:
            return "map:%i" % self.ident
        return "private"

    @property
    def level(self):
        if self.region == CTX:
            return ROOT
        if self.region == HEAP:
            return self.ident
        return None


@dataclass
class AccessSet:
    accesses: Dict[int, Access] = field(default_factory=dict)
    reads: Dict[str, List[Tuple[int, int]]] = field(default_factory=dict)
    writes: Dict[str, List[Tuple[int, int]]] = field(default_factory=dict)
    variable: Set[str] = field(default_factory=set)

    @property
    def ctx_reads(self):
        return sorted(set(self.reads.get(ROOT, [])))

    @property
    def ctx_writes(self):
        return sorted(set(self.writes.get(ROOT, [])))

    def record(self, level, start, end, write):
        table = self.writes if write else self.reads
        table.setdefault(level, []).append((start, end))

    def ranges(self, level):
        return self.reads.get(level, []) + self.writes.get(level, [])

    def levels(self):
        return set(self.reads) | set(self.writes) | set(self.variable)

    def fields(self, spec, level=ROOT):
        """Names of the mirrored fields touched at a level."""
        touched = self.ranges(level)
        return [f.name for f in spec.levels.get(level, ())
                if any(s < f.end and f.ctx_offset < e for s, e in touched)]

    def by_component(self):
        counts = {}
        for a in self.accesses.values():
            counts[a.component] = counts.get(a.component, 0) + 1
        return counts


@dataclass
class AnalysisEnv:
    """What the loader knows about the program's surroundings."""
    spec: object = None
    # map id -> value size
    maps: Dict[int, int] = field(default_factory=dict)


Analysis = namedtuple("Analysis", ["provenance", "access_set"])


def entry_state():
    regs = [Prov(SCALAR, 0)] * isa.NUM_REGS
    regs[1] = Prov(CTX, 0)
    regs[isa.FRAME_REG] = Prov(STACK, 0)
    return State(tuple(regs))


class _Analyzer(object):
    def __init__(self, program, env):
        self.program = program
        self.env = env or AnalysisEnv()
        self.spec = self.env.spec
        self.access_set = AccessSet()

    # ============ structural checks ... ============

    def check_structure(self):
        p = self.program
        if len(p) == 0:
            raise EmptyProgram("program has no instructions")
        if p.privilege == "unprivileged" and len(p) > isa.MAX_UNPRIVILEGED_INSNS:
            raise TooManyInstructions(
                "%i instructions, unprivileged programs are limited to %i"
                % (len(p), isa.MAX_UNPRIVILEGED_INSNS)
            )
        for pc, insn in enumerate(p):
            if insn.dst in isa.RESERVED_REGS or insn.src in isa.RESERVED_REGS:
                raise ReservedRegister("r11 and r12 are reserved for instrumentation", pc)
            op = insn.opcode
            if (isa.is_alu(op) or isa.is_load(op)) and insn.dst == isa.FRAME_REG:
                raise FrameRegisterWrite("r10 is read-only", pc)

    # ============ transfer functions ... ============

    def alu(self, pc, insn, regs):
        wide = isa.insn_class(insn.opcode) == isa.BPF_ALU64
        name = isa.alu_name(insn.opcode)
        dst = regs[insn.dst]
        if insn.opcode & isa.BPF_X:
            src = regs[insn.src]
        else:
            src = Prov(SCALAR, isa.imm_operand(insn))

        if name == "mov":
            if wide:
                return src
            if src.kind == SCALAR:
                return Prov(SCALAR, None if src.off is None else src.off & isa.U32)
            return UNKNOWN_PROV

        if dst.kind == SCALAR and src.kind == SCALAR:
            if dst.off is None or src.off is None:
                return SCALAR_ANY
            return Prov(SCALAR, isa.alu_compute(name, dst.off, src.off, wide))
        if not wide:
            return UNKNOWN_PROV

        def delta(p, sign=1):
            return None if p.off is None else sign * to_signed(p.off, 64)

        if name == "add":
            if dst.is_pointer and src.is_pointer:
                raise PointerPlusPointer("adding two pointers (%s + %s)" % (dst, src), pc)
            if dst.is_pointer and src.kind == SCALAR:
                return dst.shifted(delta(src))
            if src.is_pointer and dst.kind == SCALAR:
                return src.shifted(delta(dst))
        if name == "sub":
            if dst.is_pointer and src.kind == SCALAR:
                return dst.shifted(delta(src, -1))
            if dst.is_pointer and src.is_pointer and (dst.kind, dst.ident) == (src.kind, src.ident):
                if dst.off is None or src.off is None:
                    return SCALAR_ANY
                return Prov(SCALAR, (dst.off - src.off) & isa.U64)
        return UNKNOWN_PROV

    def context_access(self, pc, insn, base, eff, width, store, value):
        level = ROOT if base.kind == CTX else base.ident
        if self.spec is None:
            raise InvalidContextAccess("program has no context", pc)
        if store and value.kind != SCALAR:
            raise PointerLeak("storing %s into the context" % value, pc)
        if eff is None:
            self.access_set.variable.add(level)
            return None, (UNKNOWN_PROV if not store else None)
        f = self.spec.field_at(level, eff, width)
        if f is None:
            raise InvalidContextAccess(
                "%i-byte access at ctx%s offset %i is not inside one mirrored field"
                % (width, "[%s]" % level if level else "", eff), pc)
        if f.kind == REFERENCE:
            if store:
                raise InvalidContextAccess("reference field %s is read-only" % f.name, pc)
            if width != 8 or eff != f.ctx_offset:
                raise InvalidContextAccess("partial load of reference field %s" % f.name, pc)
            loaded = Prov(HEAP, 0, f.child)
        else:
            if not store and not f.readable:
                raise InvalidContextAccess("field %s is write-only" % f.name, pc)
            loaded = SCALAR_ANY
        self.access_set.record(level, eff, eff + width, store)
        return f, loaded

    def memory(self, pc, insn, state):
        regs = state.regs
        store = isa.is_store(insn.opcode)
        width = isa.mem_width(insn.opcode)
        base = regs[isa.mem_base(insn)]
        if not base.is_pointer:
            raise UnknownBaseAccess("access through %s in r%i" % (base, isa.mem_base(insn)), pc)
        if isa.insn_class(insn.opcode) == isa.BPF_STX:
            value = regs[insn.src]
        else:
            value = Prov(SCALAR, isa.sign_extend_imm(insn.imm))
        eff = None if base.off is None else base.off + insn.off
        loaded = SCALAR_ANY
        spills = state.spill_map()
        f = None

        if base.kind == STACK:
            if eff is not None and not (-STACK_SIZE <= eff and eff + width <= 0):
                raise StackOutOfBounds("stack access at frame%+d" % eff, pc)
            if store:
                if eff is None:
                    spills = {off: UNKNOWN_PROV for off in spills}
                else:
                    spills = {off: p for off, p in spills.items()
                              if not (off < eff + width and eff < off + 8)}
                    if value.kind != SCALAR and width == 8 and eff % 8 == 0:
                        spills[eff] = value
            else:
                if eff is None:
                    loaded = UNKNOWN_PROV if spills else SCALAR_ANY
                elif width == 8 and eff in spills:
                    loaded = spills[eff]
        elif base.kind in (CTX, HEAP):
            f, ctx_loaded = self.context_access(pc, insn, base, eff, width, store, value)
            if ctx_loaded is not None:
                loaded = ctx_loaded
        else:
            if store and value.kind != SCALAR:
                raise PointerLeak("storing %s into map %s" % (value, base.ident), pc)

        self.access_set.accesses[pc] = Access(
            pc, "store" if store else "load", width, base.kind, eff, base.ident, f
        )
        state = State(state.regs, tuple(sorted(spills.items())))
        if not store:
            state = state.with_reg(insn.dst, loaded)
        return state

    def helper_buffer(self, ptr, length):
        if ptr.kind not in (CTX, HEAP):
            return
        level = ROOT if ptr.kind == CTX else ptr.ident
        if ptr.off is None or length is None:
            self.access_set.variable.add(level)
        else:
            self.access_set.record(level, ptr.off, ptr.off + length, False)

    def call(self, pc, insn, state):
        regs = state.regs
        helper = insn.imm
        r0 = SCALAR_ANY
        if helper == HELPER_MAP_LOOKUP:
            r1 = regs[1]
            if r1.kind == SCALAR and r1.off is not None and r1.off in self.env.maps:
                r0 = Prov(MAP, 0, r1.off)
            else:
                r0 = UNKNOWN_PROV
        elif helper == HELPER_MAP_UPDATE:
            r1 = regs[1]
            size = self.env.maps.get(r1.off) if r1.kind == SCALAR else None
            self.helper_buffer(regs[3], size)
        elif helper == HELPER_TRACE_LOG:
            self.helper_buffer(regs[1], regs[2].off if regs[2].kind == SCALAR else None)
        new = list(regs)
        new[0] = r0
        for r in range(1, 6):
            new[r] = UNKNOWN_PROV
        return State(tuple(new), state.spills)

    # ============ driver ... ============

    def run(self):
        self.check_structure()
        p = self.program
        n = len(p)
        incoming = [None] * n
        incoming[0] = entry_state()
        provenance = [None] * n

        def flow(pc, target, state):
            if target == n:
                raise FallOffEnd("control falls off the end of the program", pc)
            incoming[target] = _join_states(incoming[target], state)

        for pc, insn in enumerate(p):
            state = incoming[pc]
            if state is None:
                raise UnreachableInstruction("instruction is unreachable", pc)
            provenance[pc] = state
            op = insn.opcode
            if isa.is_exit(op):
                if state.regs[0].is_pointer:
                    raise PointerLeak("returning %s in r0" % state.regs[0], pc)
                continue
            if isa.is_jump(op):
                if insn.off < 0:
                    raise BackwardJump("backward jump %+d" % insn.off, pc)
                target = pc + 1 + insn.off
                if target > n:
                    raise JumpOutOfRange("jump to %i past the end" % target, pc)
                flow(pc, target, state)
                if op & 0xF0 != isa.BPF_JA:
                    flow(pc, pc + 1, state)
                continue
            if isa.is_alu(op):
                state = state.with_reg(insn.dst, self.alu(pc, insn, state.regs))
            elif isa.is_mem(op):
                state = self.memory(pc, insn, state)
            elif isa.is_call(op):
                state = self.call(pc, insn, state)
            flow(pc, pc + 1, state)

        return Analysis(provenance, self.access_set)


def check_and_analyze(program, env=None):
    """
    Reject programs the loader would refuse and classify every access.
    Returns (provenance per pc, AccessSet).
    """
    try:
        analysis = _Analyzer(program, env).run()
    except LoadError as e:
        logger.debug("rejected %s: %s" % (program.name or "program", e))
        raise
    return analysis


def require_constant_context(analysis):
    """Context accesses must be convertible to kernel field accesses."""
    if analysis.access_set.variable:
        raise VariableContextOffset(
            "variable context offsets at level(s) %s"
            % ", ".join(repr(k) for k in sorted(analysis.access_set.variable))
        )
