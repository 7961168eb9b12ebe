# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
eBPF-style instruction set: opcodes, the Program container, the text
assembler/disassembler and the 8-byte binary codec.

Binary layout of an instruction (standard eBPF encoding):
    byte 0      opcode
    byte 1      dst register in the low nibble, src register in the high nibble
    bytes 2-3   signed little-endian offset
    bytes 4-7   signed little-endian immediate
"""

import re
import struct
from collections import namedtuple
from dataclasses import dataclass, field
from enum import Enum
from logging import getLogger
from typing import List, Optional

from bpfbox.errors import BpfBoxError
from bpfbox.utils import U32, U64, sign_extend_imm, to_signed

logger = getLogger()


class IsaError(BpfBoxError):
    pass


class AssemblyError(IsaError):
    def __init__(self, lineno, message):
        super(AssemblyError, self).__init__("line %i: %s" % (lineno, message))
        self.lineno = lineno


class DecodeError(IsaError):
    pass


class Truncated(DecodeError):
    pass


class InvalidOpcode(DecodeError):
    pass


# instruction classes
BPF_LDX = 0x01
BPF_ST = 0x02
BPF_STX = 0x03
BPF_ALU = 0x04
BPF_JMP = 0x05
BPF_ALU64 = 0x07

# source operand
BPF_K = 0x00
BPF_X = 0x08

BPF_MEM = 0x60

# jump operations
BPF_JA = 0x00
BPF_CALL = 0x80
BPF_EXIT = 0x90

ALU_OPS = {
    "add": 0x00,
    "sub": 0x10,
    "mul": 0x20,
    "or": 0x40,
    "and": 0x50,
    "lsh": 0x60,
    "rsh": 0x70,
    "xor": 0xA0,
    "mov": 0xB0,
}
ALU_NAMES = {v: k for k, v in ALU_OPS.items()}

JMP_OPS = {
    "jeq": 0x10,
    "jgt": 0x20,
    "jne": 0x50,
    "jlt": 0xA0,
}
JMP_NAMES = {v: k for k, v in JMP_OPS.items()}

SIZES = {"b": 0x10, "h": 0x08, "w": 0x00, "dw": 0x18}
SIZE_NAMES = {v: k for k, v in SIZES.items()}
WIDTHS = {"b": 1, "h": 2, "w": 4, "dw": 8}
WIDTH_SUFFIX = {v: k for k, v in WIDTHS.items()}

NUM_REGS = 13
GUEST_REGS = 11
FRAME_REG = 10
# scratch registers owned by the instrumentation
RESERVED_REGS = (11, 12)

MAX_UNPRIVILEGED_INSNS = 4096

Instruction = namedtuple("Instruction", ["opcode", "dst", "src", "off", "imm"])


class Origin(Enum):
    ORIGINAL = "original"
    ADDRESS_FORM = "AddressForm"
    ACCESS_CHECK = "AccessCheck"
    SANDBOX = "Sandbox"
    INJECTED = "Injected"

    def describe(self):
        if self is Origin.ORIGINAL:
            return "original"
        return "inserted(%s)" % self.value


def _build_opcode_table():
    table = {}
    for cls, suffix in ((BPF_ALU64, "64"), (BPF_ALU, "32")):
        for name, op in ALU_OPS.items():
            table[cls | op | BPF_K] = name + suffix
            table[cls | op | BPF_X] = name + suffix
    for name, size in SIZES.items():
        table[BPF_LDX | BPF_MEM | size] = "ldx" + name
        table[BPF_STX | BPF_MEM | size] = "stx" + name
        table[BPF_ST | BPF_MEM | size] = "st" + name
    table[BPF_JMP | BPF_JA] = "ja"
    for name, op in JMP_OPS.items():
        table[BPF_JMP | op | BPF_K] = name
        table[BPF_JMP | op | BPF_X] = name
    table[BPF_JMP | BPF_CALL] = "call"
    table[BPF_JMP | BPF_EXIT] = "exit"
    return table


OPCODES = _build_opcode_table()


def insn_class(opcode):
    return opcode & 0x07


def is_alu(opcode):
    return insn_class(opcode) in (BPF_ALU, BPF_ALU64)


def is_load(opcode):
    return insn_class(opcode) == BPF_LDX


def is_store(opcode):
    return insn_class(opcode) in (BPF_ST, BPF_STX)


def is_mem(opcode):
    return is_load(opcode) or is_store(opcode)


def is_jump(opcode):
    """Conditional and unconditional jumps, not call or exit."""
    return insn_class(opcode) == BPF_JMP and opcode & 0xF0 not in (BPF_CALL, BPF_EXIT)


def is_call(opcode):
    return opcode == BPF_JMP | BPF_CALL


def is_exit(opcode):
    return opcode == BPF_JMP | BPF_EXIT


def mem_width(opcode):
    return WIDTHS[SIZE_NAMES[opcode & 0x18]]


def mem_base(insn):
    """Register holding the base address of a load or store."""
    return insn.src if is_load(insn.opcode) else insn.dst


# ============ instruction constructors ... ============

def alu64_imm(name, dst, imm):
    return Instruction(BPF_ALU64 | ALU_OPS[name] | BPF_K, dst, 0, 0, imm)


def alu64_reg(name, dst, src):
    return Instruction(BPF_ALU64 | ALU_OPS[name] | BPF_X, dst, src, 0, 0)


def alu32_imm(name, dst, imm):
    return Instruction(BPF_ALU | ALU_OPS[name] | BPF_K, dst, 0, 0, imm)


def alu32_reg(name, dst, src):
    return Instruction(BPF_ALU | ALU_OPS[name] | BPF_X, dst, src, 0, 0)


def jump_imm(name, dst, imm, off):
    return Instruction(BPF_JMP | JMP_OPS[name] | BPF_K, dst, 0, off, imm)


def jump_reg(name, dst, src, off):
    return Instruction(BPF_JMP | JMP_OPS[name] | BPF_X, dst, src, off, 0)


def ldx(width, dst, src, off=0):
    return Instruction(BPF_LDX | BPF_MEM | SIZES[WIDTH_SUFFIX[width]], dst, src, off, 0)


def stx(width, dst, src, off=0):
    return Instruction(BPF_STX | BPF_MEM | SIZES[WIDTH_SUFFIX[width]], dst, src, off, 0)


def st_imm(width, dst, off, imm):
    return Instruction(BPF_ST | BPF_MEM | SIZES[WIDTH_SUFFIX[width]], dst, 0, off, imm)


def ja(off):
    return Instruction(BPF_JMP | BPF_JA, 0, 0, off, 0)


def call(helper_id):
    return Instruction(BPF_JMP | BPF_CALL, 0, 0, 0, helper_id)


def exit_insn():
    return Instruction(BPF_JMP | BPF_EXIT, 0, 0, 0, 0)


def with_base(insn, reg, off=0):
    """Same load/store through another base register."""
    if is_load(insn.opcode):
        return insn._replace(src=reg, off=off)
    return insn._replace(dst=reg, off=off)


# ============ operational semantics ... ============

def alu_name(opcode):
    return ALU_NAMES[opcode & 0xF0]


def jump_name(opcode):
    return JMP_NAMES[opcode & 0xF0]


def imm_operand(insn):
    """The immediate as a 64-bit operand; ALU32 sees only the low word."""
    if insn_class(insn.opcode) == BPF_ALU:
        return insn.imm & U32
    return sign_extend_imm(insn.imm)


def alu_compute(name, dst, src, wide=True):
    """One ALU operation on unsigned values; 32-bit forms zero-extend."""
    bits = 64 if wide else 32
    mask = U64 if wide else U32
    dst &= mask
    src &= mask
    if name == "mov":
        return src
    if name == "add":
        return (dst + src) & mask
    if name == "sub":
        return (dst - src) & mask
    if name == "mul":
        return (dst * src) & mask
    if name == "or":
        return dst | src
    if name == "and":
        return dst & src
    if name == "xor":
        return dst ^ src
    if name == "lsh":
        return (dst << (src & (bits - 1))) & mask
    if name == "rsh":
        return dst >> (src & (bits - 1))
    raise IsaError("unknown ALU operation %r" % name)


def jump_taken(name, dst, src):
    """Conditional jumps compare unsigned 64-bit values."""
    dst &= U64
    src &= U64
    if name == "jeq":
        return dst == src
    if name == "jne":
        return dst != src
    if name == "jgt":
        return dst > src
    if name == "jlt":
        return dst < src
    raise IsaError("unknown jump %r" % name)


@dataclass
class Program:
    instructions: List[Instruction]
    privilege: str = "unprivileged"
    context_type: Optional[str] = None
    insn_origin: Optional[List[Origin]] = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        self.instructions = list(self.instructions)
        if self.insn_origin is None:
            self.insn_origin = [Origin.ORIGINAL] * len(self.instructions)
        self.insn_origin = list(self.insn_origin)
        if len(self.insn_origin) != len(self.instructions):
            raise IsaError("insn_origin does not cover every instruction")
        if self.privilege not in ("unprivileged", "privileged"):
            raise IsaError("unknown privilege level %r" % self.privilege)

    def __len__(self):
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def __getitem__(self, pc):
        return self.instructions[pc]

    def count(self, origin):
        return sum(1 for o in self.insn_origin if o is origin)

    def is_rewritten(self):
        return any(o is not Origin.ORIGINAL for o in self.insn_origin)

    def replace(self, instructions, insn_origin):
        return Program(
            instructions,
            privilege=self.privilege,
            context_type=self.context_type,
            insn_origin=insn_origin,
            name=self.name,
        )


# ============ binary codec ... ============

_INSN = struct.Struct("<BBhi")


def encode(program):
    out = bytearray()
    for insn in program:
        out += _INSN.pack(
            insn.opcode,
            (insn.src & 0xF) << 4 | (insn.dst & 0xF),
            insn.off,
            to_signed(insn.imm, 32),
        )
    return bytes(out)


def decode(data, privilege="unprivileged", context_type=None):
    if len(data) % _INSN.size:
        raise Truncated("%i bytes is not a whole number of instructions" % len(data))
    instructions = []
    for pc in range(len(data) // _INSN.size):
        opcode, regs, off, imm = _INSN.unpack_from(data, pc * _INSN.size)
        if opcode not in OPCODES:
            raise InvalidOpcode("invalid opcode 0x%02x at pc %i" % (opcode, pc))
        dst, src = regs & 0xF, regs >> 4
        if dst >= NUM_REGS or src >= NUM_REGS:
            raise DecodeError("register out of range at pc %i" % pc)
        instructions.append(Instruction(opcode, dst, src, off, imm))
    return Program(instructions, privilege=privilege, context_type=context_type)


# ============ text assembler ... ============

_MEM_RE = re.compile(r"^\[\s*r(\d+)\s*(?:([+-])\s*(\w+))?\s*\]$")
_INT_RE = re.compile(r"^[+-]?(0[xX][0-9a-fA-F]+|\d+)$")
_ALU_RE = re.compile(r"^(%s)(64|32)$" % "|".join(ALU_OPS))
_LDX_RE = re.compile(r"^ldx(dw|b|h|w)$")
_STX_RE = re.compile(r"^stx(dw|b|h|w)$")
_ST_RE = re.compile(r"^st(dw|b|h|w)$")


class _LineParser(object):
    def __init__(self, lineno, allow_reserved):
        self.lineno = lineno
        self.allow_reserved = allow_reserved

    def error(self, message):
        return AssemblyError(self.lineno, message)

    def reg(self, token):
        token = token.strip()
        if not re.match(r"^r\d+$", token):
            raise self.error("expected a register, got %r" % token)
        index = int(token[1:])
        if index >= NUM_REGS:
            raise self.error("register out of range: %s" % token)
        if index in RESERVED_REGS and not self.allow_reserved:
            raise self.error("reserved register: %s" % token)
        return index

    def is_reg(self, token):
        return re.match(r"^r\d+$", token.strip()) is not None

    def integer(self, token, bits, what):
        token = token.strip()
        if not _INT_RE.match(token):
            raise self.error("bad %s %r" % (what, token))
        value = int(token, 16) if "x" in token.lower() else int(token, 10)
        lo, hi = -(1 << (bits - 1)), (1 << bits) - 1
        if not lo <= value <= hi:
            raise self.error("%s out of range: %s" % (what, token))
        return to_signed(value, bits)

    def branch(self, token):
        # offsets past the signed range are never valid, even written in hex
        value = self.integer(token, 16, "offset")
        if value != int(token.strip(), 16 if "x" in token.lower() else 10):
            raise self.error("offset out of range: %s" % token.strip())
        return value

    def mem(self, token):
        m = _MEM_RE.match(token.strip())
        if m is None:
            raise self.error("bad memory operand %r" % token)
        base = self.reg("r" + m.group(1))
        off = 0
        if m.group(2):
            off = self.branch(m.group(2) + m.group(3))
        return base, off

    def operands(self, rest, count):
        ops = _split_operands(rest)
        if len(ops) != count:
            raise self.error("expected %i operands, got %i" % (count, len(ops)))
        return ops


def _split_operands(rest):
    rest = rest.strip()
    if not rest:
        return []
    ops, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            ops.append(cur.strip())
            cur = ""
        else:
            cur += ch
    ops.append(cur.strip())
    return ops


def _assemble_line(line, lineno, allow_reserved):
    p = _LineParser(lineno, allow_reserved)
    parts = line.split(None, 1)
    mnemonic = parts[0].lower()
    rest = parts[1] if len(parts) > 1 else ""

    m = _ALU_RE.match(mnemonic)
    if m:
        cls = BPF_ALU64 if m.group(2) == "64" else BPF_ALU
        dst, src = p.operands(rest, 2)
        op = cls | ALU_OPS[m.group(1)]
        if p.is_reg(src):
            return Instruction(op | BPF_X, p.reg(dst), p.reg(src), 0, 0)
        return Instruction(op | BPF_K, p.reg(dst), 0, 0, p.integer(src, 32, "immediate"))

    m = _LDX_RE.match(mnemonic)
    if m:
        dst, mem = p.operands(rest, 2)
        base, off = p.mem(mem)
        return Instruction(BPF_LDX | BPF_MEM | SIZES[m.group(1)], p.reg(dst), base, off, 0)

    m = _STX_RE.match(mnemonic)
    if m:
        mem, src = p.operands(rest, 2)
        base, off = p.mem(mem)
        return Instruction(BPF_STX | BPF_MEM | SIZES[m.group(1)], base, p.reg(src), off, 0)

    m = _ST_RE.match(mnemonic)
    if m:
        mem, imm = p.operands(rest, 2)
        base, off = p.mem(mem)
        return Instruction(
            BPF_ST | BPF_MEM | SIZES[m.group(1)], base, 0, off, p.integer(imm, 32, "immediate")
        )

    if mnemonic == "ja":
        (target,) = p.operands(rest, 1)
        return Instruction(BPF_JMP | BPF_JA, 0, 0, p.branch(target), 0)

    if mnemonic in JMP_OPS:
        dst, src, target = p.operands(rest, 3)
        op = BPF_JMP | JMP_OPS[mnemonic]
        if p.is_reg(src):
            return Instruction(op | BPF_X, p.reg(dst), p.reg(src), p.branch(target), 0)
        return Instruction(
            op | BPF_K, p.reg(dst), 0, p.branch(target), p.integer(src, 32, "immediate")
        )

    if mnemonic == "call":
        (helper,) = p.operands(rest, 1)
        return Instruction(BPF_JMP | BPF_CALL, 0, 0, 0, p.integer(helper, 32, "helper id"))

    if mnemonic == "exit":
        p.operands(rest, 0)
        return Instruction(BPF_JMP | BPF_EXIT, 0, 0, 0, 0)

    raise p.error("unknown mnemonic %r" % parts[0])


def assemble(text, privilege="unprivileged", context_type=None, allow_reserved=False):
    """
    Assemble source text, one instruction per line; ';' starts a comment.
    Reserved registers are only accepted for instrumented listings.
    """
    instructions = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        instructions.append(_assemble_line(line, lineno, allow_reserved))
    return Program(instructions, privilege=privilege, context_type=context_type)


def _fmt_imm(imm):
    if imm > 4095:
        return hex(imm)
    return str(imm)


def _fmt_off(off):
    return "%+d" % off


def _fmt_mem(base, off):
    if off == 0:
        return "[r%i+0]" % base
    return "[r%i%+d]" % (base, off)


def disassemble_insn(insn):
    op = insn.opcode
    name = OPCODES.get(op)
    if name is None:
        raise InvalidOpcode("invalid opcode 0x%02x" % op)
    cls = insn_class(op)
    if cls in (BPF_ALU, BPF_ALU64):
        if op & BPF_X:
            return "%s r%i, r%i" % (name, insn.dst, insn.src)
        return "%s r%i, %s" % (name, insn.dst, _fmt_imm(insn.imm))
    if cls == BPF_LDX:
        return "%s r%i, %s" % (name, insn.dst, _fmt_mem(insn.src, insn.off))
    if cls == BPF_STX:
        return "%s %s, r%i" % (name, _fmt_mem(insn.dst, insn.off), insn.src)
    if cls == BPF_ST:
        return "%s %s, %s" % (name, _fmt_mem(insn.dst, insn.off), _fmt_imm(insn.imm))
    if name == "ja":
        return "ja %s" % _fmt_off(insn.off)
    if name in JMP_OPS:
        if op & BPF_X:
            return "%s r%i, r%i, %s" % (name, insn.dst, insn.src, _fmt_off(insn.off))
        return "%s r%i, %s, %s" % (name, insn.dst, _fmt_imm(insn.imm), _fmt_off(insn.off))
    if name == "call":
        return "call %i" % insn.imm
    return "exit"


def disassemble(program, annotate=False):
    lines = []
    for insn, origin in zip(program.instructions, program.insn_origin):
        text = disassemble_insn(insn)
        if annotate and origin is not Origin.ORIGINAL:
            text = "%-32s ; %s" % (text, origin.describe())
        lines.append(text)
    return "\n".join(lines) + ("\n" if lines else "")


def load_program(path, privilege="unprivileged", context_type=None):
    """Read a program from a `.asm` listing or a `.bin` image."""
    if path.endswith(".bin"):
        with open(path, "rb") as f:
            program = decode(f.read(), privilege=privilege, context_type=context_type)
    else:
        with open(path, "r") as f:
            program = assemble(
                f.read(), privilege=privilege, context_type=context_type, allow_reserved=True
            )
    logger.debug("loaded %i instructions from %s" % (len(program), path))
    return program
