# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Seeded synthesis of in-bounds programs.

Register plan: r6 holds the context, r7 the first nested object (when the
context has one), r8 and r9 carry values. Every access stays inside a
mirrored field, an initialized stack slot or a looked-up map value, so the
program behaves the same in every mode and under the reference interpreter.
"""

from logging import getLogger

import numpy as np

from bpfbox import isa
from bpfbox.context import REFERENCE, ROOT, SCALAR

logger = getLogger()

VALUE_REGS = (8, 9)
ALU_CHOICES = ("mov", "add", "sub", "mul", "or", "and", "xor", "lsh", "rsh")
BRANCHES = ("jeq", "jne", "jgt", "jlt")
WIDTHS = (1, 2, 4, 8)
MAX_MAP_VALUE = 256


def _fits(width, size):
    return [w for w in WIDTHS if w <= min(width, size)]


class ProgramSynth(object):
    def __init__(self, world, rng):
        self.world = world
        self.rng = rng
        self.spec = world.spec
        self.code = []
        # 8-byte stack slots (negative frame offsets) holding defined bytes
        self.slots = set()
        self.nested = None

    def choice(self, seq):
        return seq[self.rng.randint(len(seq))]

    def emit(self, insn):
        self.code.append(insn)

    def value_reg(self):
        return self.choice(VALUE_REGS)

    # ============ fields ... ============

    def fields(self, level, want):
        if self.spec is None:
            return []
        out = []
        for f in self.spec.level(level):
            if f.kind != SCALAR:
                continue
            if want == "read" and f.readable:
                out.append(f)
            elif want == "write" and f.writable:
                out.append(f)
        return out

    def field_access(self, f):
        """(offset, width) of an access inside `f`."""
        width = self.choice(_fits(8, f.size))
        k = self.rng.randint(f.size // width)
        return f.ctx_offset + k * width, width

    # ============ generators ... ============

    def gen_ctx_read(self):
        candidates = self.fields(ROOT, "read")
        if not candidates:
            return self.gen_alu()
        off, width = self.field_access(self.choice(candidates))
        self.emit(isa.ldx(width, self.value_reg(), 6, off))

    def gen_nested_read(self):
        if self.nested is None:
            return self.gen_ctx_read()
        candidates = self.fields(self.nested, "read")
        if not candidates:
            return self.gen_alu()
        off, width = self.field_access(self.choice(candidates))
        self.emit(isa.ldx(width, self.value_reg(), 7, off))

    def alu_insn(self, dst):
        name = self.choice(ALU_CHOICES)
        wide = self.rng.rand() < 0.7
        make_imm = isa.alu64_imm if wide else isa.alu32_imm
        make_reg = isa.alu64_reg if wide else isa.alu32_reg
        if name in ("lsh", "rsh"):
            return make_imm(name, dst, int(self.rng.randint(64 if wide else 32)))
        if self.rng.rand() < 0.5:
            return make_reg(name, dst, self.choice(VALUE_REGS))
        return make_imm(name, dst, int(self.rng.randint(-(1 << 20), 1 << 20)))

    def gen_alu(self):
        self.emit(self.alu_insn(self.value_reg()))

    def spill(self, off):
        self.emit(isa.stx(8, isa.FRAME_REG, self.value_reg(), off))
        self.slots.add(off)

    def gen_stack(self):
        if self.slots and self.rng.rand() < 0.5:
            self.emit(isa.ldx(8, self.value_reg(), isa.FRAME_REG, self.choice(sorted(self.slots))))
            return
        self.spill(-8 * int(self.rng.randint(1, 64)))

    def gen_ctx_write(self):
        candidates = self.fields(ROOT, "write")
        if not candidates:
            return self.gen_alu()
        off, width = self.field_access(self.choice(candidates))
        if self.rng.rand() < 0.3:
            self.emit(isa.st_imm(width, 6, off, int(self.rng.randint(0, 1 << 15))))
        else:
            self.emit(isa.stx(width, 6, self.value_reg(), off))

    def maps(self):
        return [d for d in self.world.maps if d.value_size <= MAX_MAP_VALUE]

    def gen_map_lookup(self):
        maps = self.maps()
        if 1 not in self.world.helpers_enabled or not maps:
            return self.gen_alu()
        desc = self.choice(maps)
        # one index in eight misses, exercising the null path
        index = int(self.rng.randint(desc.max_entries + max(desc.max_entries // 8, 1)))
        width = max(_fits(8, desc.value_size))
        off = width * int(self.rng.randint(desc.value_size // width))
        self.emit(isa.alu64_imm("mov", 1, desc.map_id))
        self.emit(isa.alu64_imm("mov", 2, index))
        self.emit(isa.call(1))
        self.emit(isa.jump_imm("jeq", 0, 0, 3))
        self.emit(isa.ldx(width, 1, 0, off))
        self.emit(isa.alu64_reg("add", 1, self.value_reg()))
        self.emit(isa.stx(width, 0, 1, off))

    def buffer(self, length):
        """Frame offset of `length` defined stack bytes."""
        slots = (length + 7) // 8
        start = -8 * int(self.rng.randint(slots, 64))
        for k in range(slots):
            if start + 8 * k not in self.slots:
                self.spill(start + 8 * k)
        return start

    def gen_map_update(self):
        maps = self.maps()
        if 2 not in self.world.helpers_enabled or not maps:
            return self.gen_alu()
        desc = self.choice(maps)
        off = self.buffer(desc.value_size)
        self.emit(isa.alu64_imm("mov", 1, desc.map_id))
        self.emit(isa.alu64_imm("mov", 2, int(self.rng.randint(desc.max_entries + 1))))
        self.emit(isa.alu64_reg("mov", 3, isa.FRAME_REG))
        self.emit(isa.alu64_imm("add", 3, off))
        self.emit(isa.call(2))
        self.emit(isa.alu64_reg("mov", self.value_reg(), 0))

    def gen_trace_log(self):
        if 3 not in self.world.helpers_enabled:
            return self.gen_alu()
        length = int(self.rng.randint(1, 33))
        off = self.buffer(length)
        self.emit(isa.alu64_reg("mov", 1, isa.FRAME_REG))
        self.emit(isa.alu64_imm("add", 1, off))
        self.emit(isa.alu64_imm("mov", 2, length))
        self.emit(isa.call(3))

    def gen_clock(self):
        helper = self.choice([h for h in (4, 5) if h in self.world.helpers_enabled] or [0])
        if not helper:
            return self.gen_alu()
        self.emit(isa.call(helper))
        self.emit(isa.alu64_reg("mov", self.value_reg(), 0))

    def gen_ctx_store_helper(self):
        candidates = [f for f in self.fields(ROOT, "write") if f.size == 4]
        if 6 not in self.world.helpers_enabled or not candidates:
            return self.gen_alu()
        f = self.choice(candidates)
        self.emit(isa.alu64_reg("mov", 1, 6))
        self.emit(isa.alu64_imm("mov", 2, f.ctx_offset))
        self.emit(isa.alu64_reg("mov", 3, self.value_reg()))
        self.emit(isa.call(6))

    def gen_branch(self):
        self.emit(isa.jump_imm(self.choice(BRANCHES), self.value_reg(), int(self.rng.randint(0, 256)), 1))
        self.gen_alu()

    # ============ driver ... ============

    GENERATORS = (
        ("gen_ctx_read", 4),
        ("gen_nested_read", 2),
        ("gen_alu", 5),
        ("gen_stack", 3),
        ("gen_ctx_write", 2),
        ("gen_map_lookup", 2),
        ("gen_map_update", 1),
        ("gen_trace_log", 1),
        ("gen_clock", 1),
        ("gen_ctx_store_helper", 1),
        ("gen_branch", 2),
    )

    def build(self, ops):
        names = [name for name, _ in self.GENERATORS]
        weights = np.array([w for _, w in self.GENERATORS], dtype=np.float64)
        weights /= weights.sum()

        self.emit(isa.alu64_reg("mov", 6, 1))
        for reg in VALUE_REGS:
            self.emit(isa.alu64_imm("mov", reg, int(self.rng.randint(0, 1 << 16))))
        if self.spec is not None:
            refs = [f for f in self.spec.level(ROOT) if f.kind == REFERENCE]
            if refs:
                ref = refs[0]
                self.emit(isa.ldx(8, 7, 6, ref.ctx_offset))
                self.nested = ref.child
        for _ in range(ops):
            getattr(self, names[self.rng.choice(len(names), p=weights)])()
        self.emit(isa.alu64_reg("mov", 0, 8))
        self.emit(isa.exit_insn())
        return self.code


def synthesize(world, seed, ops=None, privilege="unprivileged"):
    """A random program that stays inside its own memory, deterministic in `seed`."""
    rng = np.random.RandomState(seed)
    ops = ops if ops is not None else int(rng.randint(4, 25))
    code = ProgramSynth(world, rng).build(ops)
    context_type = world.spec.name if world.spec is not None else None
    program = isa.Program(code, privilege=privilege, context_type=context_type,
                          name="synth-%i" % seed)
    logger.debug("synthesized %s with %i instructions" % (program.name, len(program)))
    return program
