# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Address masking and the SFI rewriter.

Every guarded load/store is preceded by

    mov64 r11, <base reg>       AddressForm
    add64 r11, <offset>         AddressForm
    and64 r11, and_mask         AccessCheck
    or64  r11, or_mask          AccessCheck

and then goes through [r11+0]. Masks wider than a 32-bit immediate are first
built in r12 with shift/or chunks (AddressForm).
"""

from logging import getLogger

from bpfbox.errors import BpfBoxError
from bpfbox import isa
from bpfbox.isa import Origin
from bpfbox.sandbox import MaskPair
from bpfbox.utils import U64, is_power_of_two

logger = getLogger()

SCRATCH = 11
MASK_REG = 12
_IMM_LIMIT = 1 << 31


class InstrumentError(BpfBoxError):
    pass


class NotPowerOfTwo(InstrumentError):
    pass


class MisalignedBase(InstrumentError):
    pass


class JumpFixupOverflow(InstrumentError):
    pass


class MissingComponent(InstrumentError):
    pass


def compute_masks(base, size):
    if size < 16 or not is_power_of_two(size):
        raise NotPowerOfTwo("region size %i is not a power of two >= 16" % size)
    if base % size:
        raise MisalignedBase("base 0x%x is not aligned to %i" % (base, size))
    return MaskPair(and_mask=size - 1, or_mask=base)


def mask_address(addr, pair):
    return ((addr & pair.and_mask) | pair.or_mask) & U64


def materialize(reg, value):
    """mov/lsh/or sequence loading a 64-bit constant into `reg`."""
    value &= U64
    if value < _IMM_LIMIT:
        return [isa.alu64_imm("mov", reg, value)]
    chunks = [(value >> shift) & 0xFFFF for shift in (48, 32, 16, 0)]
    while chunks[0] == 0:
        chunks.pop(0)
    seq = [isa.alu64_imm("mov", reg, chunks[0])]
    for chunk in chunks[1:]:
        seq.append(isa.alu64_imm("lsh", reg, 16))
        if chunk:
            seq.append(isa.alu64_imm("or", reg, chunk))
    return seq


def _mask_step(op, value):
    """The AccessCheck instruction for one mask, plus any AddressForm setup."""
    if value < _IMM_LIMIT:
        return [], isa.alu64_imm(op, SCRATCH, value)
    return materialize(MASK_REG, value), isa.alu64_reg(op, SCRATCH, MASK_REG)


def guard_sequence(insn, pair):
    """Instructions (with origins) guarding one access, ending with the access itself."""
    base = isa.mem_base(insn)
    seq = [
        (isa.alu64_reg("mov", SCRATCH, base), Origin.ADDRESS_FORM),
        (isa.alu64_imm("add", SCRATCH, insn.off), Origin.ADDRESS_FORM),
    ]
    for op, value in (("and", pair.and_mask), ("or", pair.or_mask)):
        setup, check = _mask_step(op, value)
        seq.extend((i, Origin.ADDRESS_FORM) for i in setup)
        seq.append((check, Origin.ACCESS_CHECK))
    return seq


def relocate(program, insertions, replacements=None):
    """
    Insert instruction groups before original pcs and re-fix jump offsets.

    `insertions` maps an original pc (or len(program) for the tail) to a list
    of (instruction, origin); a jump to pc t lands on the group inserted
    before t. Returns the new program and the new pc of every original
    instruction.
    """
    replacements = replacements or {}
    n = len(program)
    instructions, origins = [], []
    group_start, new_pc = [0] * (n + 1), [0] * n
    for pc in range(n + 1):
        group_start[pc] = len(instructions)
        for insn, origin in insertions.get(pc, ()):
            instructions.append(insn)
            origins.append(origin)
        if pc == n:
            break
        new_pc[pc] = len(instructions)
        instructions.append(replacements.get(pc, program.instructions[pc]))
        origins.append(program.insn_origin[pc])

    for pc in range(n):
        insn = program.instructions[pc]
        if not isa.is_jump(insn.opcode):
            continue
        target = pc + 1 + insn.off
        if not 0 <= target <= n:
            raise JumpFixupOverflow("jump at pc %i leaves the program" % pc)
        off = group_start[target] - (new_pc[pc] + 1)
        if not -(1 << 15) <= off < (1 << 15):
            raise JumpFixupOverflow("jump at pc %i needs offset %i after rewriting" % (pc, off))
        instructions[new_pc[pc]] = instructions[new_pc[pc]]._replace(off=off)

    return program.replace(instructions, origins), new_pc


def _marker():
    return (isa.ja(0), Origin.SANDBOX)


def rewrite_sfi(program, analysis, components):
    """
    Guard every classified access with the mask pair of its component.

    `components` maps "private" and "map:<id>" to MaskPairs. Returns the
    rewritten program and an instrumentation report.
    """
    insertions, replacements = {}, {}
    guarded = 0
    for pc, access in sorted(analysis.access_set.accesses.items()):
        try:
            pair = components[access.component]
        except KeyError:
            raise MissingComponent("no mask pair registered for %s (pc %i)" % (access.component, pc))
        insn = program.instructions[pc]
        insertions[pc] = guard_sequence(insn, pair)
        replacements[pc] = isa.with_base(insn, SCRATCH, 0)
        guarded += 1

    insertions.setdefault(0, [])
    insertions[0] = [_marker()] + insertions[0]
    for pc, insn in enumerate(program.instructions):
        if isa.is_exit(insn.opcode):
            insertions.setdefault(pc, []).append(_marker())

    rewritten, _ = relocate(program, insertions, replacements)
    report = {
        "guarded_accesses": guarded,
        "inserted_by_category": {
            o.value: rewritten.count(o) - program.count(o)
            for o in (Origin.ADDRESS_FORM, Origin.ACCESS_CHECK, Origin.SANDBOX)
        },
    }
    logger.debug("sfi rewrite of %s: %i guarded accesses, %i -> %i instructions"
                 % (program.name or "program", guarded, len(program), len(rewritten)))
    return rewritten, report
