# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Checked reference interpreter.

Runs an unrewritten program over fat pointers: every pointer is a
(region, offset) pair and every access is bounds checked against its
region. No sandbox, no masks, no tags. Used as the oracle the four engine
modes are compared against, and to confirm that an injected access really
left the program's memory.
"""

from collections import namedtuple
from dataclasses import dataclass, field
from logging import getLogger
from typing import List, Optional

from bpfbox.context import REFERENCE, ROOT, SCALAR
from bpfbox.engine import DEFAULT_STEP_BUDGET, HELPER_NAMES, MAX_LOG_LEN, StepBudgetExceeded
from bpfbox.errors import BpfBoxError, GuestFault
from bpfbox import isa
from bpfbox.maps import map_update
from bpfbox.utils import U32, U64, to_signed

logger = getLogger()

STACK_SIZE = 512


class ReferenceModelError(BpfBoxError):
    """The program does something the checked model has no meaning for."""


class OutOfBounds(GuestFault):
    kind = "OutOfBounds"


RefTrace = namedtuple("RefTrace", ["pc", "region", "map_id", "offset", "width", "in_bounds", "kind"])


class Region(object):
    def __init__(self, kind, size, ident=None):
        self.kind = kind
        self.size = size
        self.ident = ident
        self.pointers = {}
        self.level = None

    def __repr__(self):
        return "%s%s" % (self.kind, "" if self.ident is None else ":%s" % self.ident)

    def in_bounds(self, off, width):
        return 0 <= off and off + width <= self.size

    def store_pointer(self, off, ptr):
        self.forget(off, 8)
        self.pointers[off] = ptr

    def forget(self, off, width):
        for slot in [s for s in self.pointers if s < off + width and off < s + 8]:
            del self.pointers[slot]


class BufferRegion(Region):
    def __init__(self, kind, size, ident=None):
        super(BufferRegion, self).__init__(kind, size, ident)
        self.data = bytearray(size)

    def read(self, off, width):
        return int.from_bytes(self.data[off:off + width], "little")

    def write(self, off, width, value):
        self.data[off:off + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")

    def read_bytes(self, off, length):
        return bytes(self.data[off:off + length])


class ArenaRegion(Region):
    """A region backed by arena bytes, for map values."""

    def __init__(self, kind, space, base, size, ident=None):
        super(ArenaRegion, self).__init__(kind, size, ident)
        self.space = space
        self.base = base

    def read(self, off, width):
        return self.space.read(self.base + off, width)

    def write(self, off, width, value):
        self.space.write(self.base + off, width, value)

    def read_bytes(self, off, length):
        return self.space.read_bytes(self.base + off, length)


@dataclass(frozen=True)
class Ptr:
    region: Region
    off: int

    def shifted(self, delta):
        return Ptr(self.region, self.off + delta)


@dataclass
class ReferenceResult:
    r0: int = 0
    status: str = "completed"
    fault: Optional[dict] = None
    log: List[bytes] = field(default_factory=list)
    steps: int = 0
    trace: List[RefTrace] = field(default_factory=list)
    pcs: List[int] = field(default_factory=list)

    @property
    def out_of_bounds(self):
        return [t for t in self.trace if not t.in_bounds]


class ReferenceInterpreter(object):
    def __init__(self, world, step_budget=DEFAULT_STEP_BUDGET):
        self.world = world
        self.step_budget = step_budget
        self.maps = {d.map_id: ArenaRegion("map", world.space, d.base,
                                           d.value_size * d.max_entries, d.map_id)
                     for d in world.maps}
        self.stack = BufferRegion("stack", STACK_SIZE)
        self.objects = {}
        self.mirrors = {}
        self.written = set()
        if world.root is not None:
            self.objects = {level: obj for obj, level in world.levels.values()}
            self.ctx = self._mirror(ROOT)

    def _mirror(self, level):
        """Region holding the full mirrored layout of one context level."""
        spec, world = self.world.spec, self.world
        obj = self.objects[level]
        region = BufferRegion("ctx" if level == ROOT else "heap", spec.level_size(level),
                              None if level == ROOT else level)
        region.level = level
        self.mirrors[level] = region
        for f in spec.level(level):
            if f.kind == REFERENCE:
                region.store_pointer(f.ctx_offset, Ptr(self._mirror(f.child), 0))
            else:
                kaddr, _ = world.objects.resolve(obj, f.path)
                region.data[f.ctx_offset:f.end] = world.space.read_bytes(kaddr, f.size)
        return region

    # ============ values ... ============

    @staticmethod
    def _int(value):
        return value.off if isinstance(value, Ptr) else value

    def _alu(self, insn, regs):
        op = insn.opcode
        name = isa.alu_name(op)
        wide = isa.insn_class(op) == isa.BPF_ALU64
        dst = regs[insn.dst]
        src = regs[insn.src] if op & isa.BPF_X else isa.imm_operand(insn)
        if wide and name == "mov":
            return src
        if wide and isinstance(dst, Ptr) and not isinstance(src, Ptr):
            if name == "add":
                return dst.shifted(to_signed(src, 64))
            if name == "sub":
                return dst.shifted(-to_signed(src, 64))
        if wide and name == "add" and isinstance(src, Ptr) and not isinstance(dst, Ptr):
            return src.shifted(to_signed(dst, 64))
        if (wide and name == "sub" and isinstance(dst, Ptr) and isinstance(src, Ptr)
                and dst.region is src.region):
            return (dst.off - src.off) & U64
        # anything else strips provenance: the result no longer points anywhere
        return isa.alu_compute(name, self._int(dst) & U64, self._int(src) & U64, wide)

    def _jump(self, insn, regs):
        op = insn.opcode
        if op & 0xF0 == isa.BPF_JA:
            return True
        name = isa.jump_name(op)
        dst = regs[insn.dst]
        src = regs[insn.src] if op & isa.BPF_X else isa.imm_operand(insn)
        if isinstance(dst, Ptr) or isinstance(src, Ptr):
            if isinstance(dst, Ptr) and isinstance(src, Ptr) and dst.region is src.region:
                return isa.jump_taken(name, dst.off, src.off)
            if name in ("jeq", "jne"):
                # a live pointer is never null
                return name == "jne"
            raise ReferenceModelError("ordered comparison of a pointer")
        return isa.jump_taken(name, dst, src)

    # ============ memory ... ============

    def _access(self, pc, insn, regs, result):
        op = insn.opcode
        width = isa.mem_width(op)
        store = isa.is_store(op)
        base = regs[isa.mem_base(insn)]
        kind = "store" if store else "load"
        if not isinstance(base, Ptr):
            result.trace.append(RefTrace(pc, "wild", None, (self._int(base) + insn.off) & U64,
                                         width, False, kind))
            raise OutOfBounds("access through a non-pointer", addr=(base + insn.off) & U64, pc=pc)
        region, off = base.region, base.off + insn.off
        ok = region.in_bounds(off, width)
        result.trace.append(RefTrace(pc, region.kind, region.ident if region.kind == "map" else None,
                                     off, width, ok, kind))
        if not ok:
            raise OutOfBounds("%i-byte %s at %r%+d" % (width, kind, region, off), addr=off, pc=pc)

        if not store:
            ptr = region.pointers.get(off) if width == 8 else None
            return ptr if ptr is not None else region.read(off, width)

        if isa.insn_class(op) == isa.BPF_STX:
            value = regs[insn.src]
        else:
            value = isa.sign_extend_imm(insn.imm)
        if isinstance(value, Ptr):
            if region.kind != "stack" or width != 8:
                raise ReferenceModelError("pointer stored outside an aligned stack slot")
            region.store_pointer(off, value)
            return None
        region.forget(off, width)
        region.write(off, width, value)
        if region.kind in ("ctx", "heap"):
            self.written.add((region.level, off, width))
        return None

    def _buffer(self, ptr, length):
        if not isinstance(ptr, Ptr) or not ptr.region.in_bounds(ptr.off, length):
            raise OutOfBounds("helper buffer outside its region", addr=self._int(ptr))
        return ptr.region.read_bytes(ptr.off, length)

    # ============ helpers ... ============

    def _call(self, helper_id, args, result):
        if helper_id not in self.world.helpers_enabled or helper_id not in HELPER_NAMES:
            raise ReferenceModelError("helper %i is not available" % helper_id)
        a1, a2, a3 = args[0], self._int(args[1]), args[2]
        world = self.world
        if helper_id == 1:
            region = self.maps.get(self._int(a1))
            if region is None:
                raise ReferenceModelError("no map %r" % (a1,))
            desc = world.maps.get(region.ident)
            return Ptr(region, a2 * desc.value_size) if a2 < desc.max_entries else 0
        if helper_id == 2:
            desc = world.maps.get(self._int(a1))
            return map_update(desc, a2, self._buffer(a3, desc.value_size))
        if helper_id == 3:
            if not 1 <= a2 <= MAX_LOG_LEN:
                raise ReferenceModelError("bad trace_log length %i" % a2)
            result.log.append(self._buffer(a1, a2))
            return a2
        if helper_id == 4:
            return world.clock.tick()
        if helper_id == 5:
            return world.prandom()
        return self._ctx_store_u32(a1, a2, self._int(a3))

    def _ctx_store_u32(self, obj, ctx_offset, value):
        if not isinstance(obj, Ptr) or obj.off != 0 or obj.region.kind not in ("ctx", "heap"):
            raise ReferenceModelError("ctx_store_u32 on a non-object")
        level = obj.region.level
        f = self.world.spec.field_at(level, ctx_offset, 4)
        if f is None or f.kind != SCALAR or f.size != 4 or not f.writable:
            raise ReferenceModelError("ctx offset %i is not a writable 4-byte field" % ctx_offset)
        obj.region.write(f.ctx_offset, 4, value & U32)
        self.written.add((level, f.ctx_offset, 4))
        return 0

    def _write_back(self):
        """Written writable fields reach the kernel objects, as sync or conversion would."""
        spec, world = self.world.spec, self.world
        for level, off, width in sorted(self.written):
            for f in spec.level(level):
                if f.kind == SCALAR and f.writable and off < f.end and f.ctx_offset < off + width:
                    kaddr, _ = world.objects.resolve(self.objects[level], f.path)
                    world.space.write_bytes(kaddr, self.mirrors[level].read_bytes(f.ctx_offset, f.size))

    # ============ driver ... ============

    def run(self, program):
        result = ReferenceResult()
        regs = [0] * isa.NUM_REGS
        if self.world.root is not None:
            regs[1] = Ptr(self.ctx, 0)
        regs[isa.FRAME_REG] = Ptr(self.stack, STACK_SIZE)
        n = len(program)
        pc = 0
        try:
            while True:
                if not 0 <= pc < n:
                    raise ReferenceModelError("control left the program at pc %i" % pc)
                if result.steps >= self.step_budget:
                    raise StepBudgetExceeded("step budget of %i exhausted" % self.step_budget)
                result.steps += 1
                result.pcs.append(pc)
                insn = program.instructions[pc]
                op = insn.opcode
                if isa.is_alu(op):
                    regs[insn.dst] = self._alu(insn, regs)
                elif isa.is_mem(op):
                    loaded = self._access(pc, insn, regs, result)
                    if isa.is_load(op):
                        regs[insn.dst] = loaded
                elif isa.is_call(op):
                    regs[0] = self._call(insn.imm, regs[1:6], result)
                    for r in range(1, 6):
                        regs[r] = 0
                elif isa.is_exit(op):
                    if isinstance(regs[0], Ptr):
                        raise ReferenceModelError("pointer returned in r0")
                    result.r0 = regs[0] & U64
                    break
                elif self._jump(insn, regs):
                    pc += insn.off
                pc += 1
        except OutOfBounds as fault:
            if fault.pc is None:
                fault.pc = pc
            result.status = "faulted"
            result.fault = fault.record()
            return result
        if self.world.root is not None:
            self._write_back()
        return result


def run_reference(program, world, step_budget=DEFAULT_STEP_BUDGET):
    """Execute `program` against `world` (mutated; pass a clone to keep the original)."""
    return ReferenceInterpreter(world, step_budget).run(program)
