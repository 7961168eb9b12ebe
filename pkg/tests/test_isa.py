# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import numpy as np
import pytest

from bpfbox import isa
from bpfbox.isa import AssemblyError, InvalidOpcode, Origin, Truncated


def test_assemble_mov_exit():
    p = isa.assemble("mov64 r0, 42\nexit")
    assert len(p) == 2
    assert p[0].imm == 42
    assert isa.is_exit(p[1].opcode)
    assert p.insn_origin == [Origin.ORIGINAL, Origin.ORIGINAL]


def test_assemble_load():
    (insn,) = isa.assemble("ldxw r2, [r1+4]").instructions
    assert insn.opcode == isa.BPF_LDX | isa.BPF_MEM | isa.SIZES["w"]
    assert (insn.dst, insn.src, insn.off) == (2, 1, 4)
    assert isa.mem_width(insn.opcode) == 4


def test_assemble_comments_and_hex():
    p = isa.assemble("; header\nmov64 r1, 0x10 ; sixteen\n\njeq r1, 16, +1\nmov64 r0, 1\nexit\n")
    assert [i.imm for i in p][:2] == [16, 16]
    assert p[1].off == 1


@pytest.mark.parametrize("text", [
    "mov64 r11, 0",
    "mov64 r0, r12",
    "mov64 r13, 1",
    "frob r0, 1",
    "ldxw r2, r1",
    "mov64 r0",
])
def test_assemble_errors(text):
    with pytest.raises(AssemblyError, match="line 1"):
        isa.assemble(text)


def test_reserved_registers_allowed_for_listings():
    p = isa.assemble("mov64 r11, r10\nexit", allow_reserved=True)
    assert p[0].dst == 11


def test_encode_exit():
    assert isa.encode(isa.assemble("exit")) == bytes([0x95, 0, 0, 0, 0, 0, 0, 0])


def test_encode_empty():
    assert isa.encode(isa.Program([])) == b""


def test_decode_truncated():
    with pytest.raises(Truncated):
        isa.decode(b"\x95" + b"\x00" * 6)


def test_decode_invalid_opcode():
    with pytest.raises(InvalidOpcode):
        isa.decode(b"\xff" + b"\x00" * 7)


def test_register_nibbles_and_signed_fields():
    insn = isa.stx(8, 10, 3, -8)
    data = isa.encode(isa.Program([insn]))
    assert data[1] == 0x3A
    assert isa.decode(data)[0] == insn
    insn = isa.alu64_imm("add", 1, -1)
    assert isa.decode(isa.encode(isa.Program([insn])))[0].imm == -1


def _random_program(rng, n):
    insns = []
    for _ in range(n):
        kind = rng.randint(6)
        dst, src = int(rng.randint(10)), int(rng.randint(11))
        if kind == 0:
            insns.append(isa.alu64_imm(str(rng.choice(list(isa.ALU_OPS))), dst, int(rng.randint(-(1 << 31), 1 << 31))))
        elif kind == 1:
            insns.append(isa.alu32_reg(str(rng.choice(list(isa.ALU_OPS))), dst, src))
        elif kind == 2:
            insns.append(isa.ldx(int(rng.choice([1, 2, 4, 8])), dst, src, int(rng.randint(-512, 512))))
        elif kind == 3:
            insns.append(isa.stx(int(rng.choice([1, 2, 4, 8])), src, dst, int(rng.randint(-512, 512))))
        elif kind == 4:
            insns.append(isa.jump_imm(str(rng.choice(list(isa.JMP_OPS))), dst, int(rng.randint(256)), int(rng.randint(8))))
        else:
            insns.append(isa.call(int(rng.randint(1, 7))))
    insns.append(isa.exit_insn())
    return isa.Program(insns)


def test_round_trips():
    rng = np.random.RandomState(3)
    for _ in range(10000):
        p = _random_program(rng, int(rng.randint(1, 40)))
        assert isa.decode(isa.encode(p)) == p
        assert isa.assemble(isa.disassemble(p)) == p


def test_disassemble_annotates_inserted():
    p = isa.Program([isa.ja(0), isa.alu64_imm("mov", 0, 0), isa.exit_insn()],
                    insn_origin=[Origin.SANDBOX, Origin.ORIGINAL, Origin.ORIGINAL])
    lines = isa.disassemble(p, annotate=True).splitlines()
    assert lines[0].endswith("; inserted(Sandbox)")
    assert lines[1] == "mov64 r0, 0"
    assert p.is_rewritten()
    assert p.count(Origin.SANDBOX) == 1


def test_origins_must_cover_program():
    with pytest.raises(isa.IsaError):
        isa.Program([isa.exit_insn()], insn_origin=[])


def test_load_program(program_path):
    p = isa.load_program(program_path("ret42.asm"))
    assert [isa.disassemble_insn(i) for i in p] == ["mov64 r0, 42", "exit"]
