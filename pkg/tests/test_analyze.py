# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import pytest

from bpfbox import isa
from bpfbox.analyze import (
    CTX,
    MAP,
    SCALAR,
    STACK,
    AnalysisEnv,
    BackwardJump,
    FallOffEnd,
    FrameRegisterWrite,
    InvalidContextAccess,
    PointerLeak,
    PointerPlusPointer,
    Prov,
    ReservedRegister,
    StackOutOfBounds,
    TooManyInstructions,
    UnknownBaseAccess,
    UnreachableInstruction,
    VariableContextOffset,
    check_and_analyze,
    require_constant_context,
)


@pytest.fixture
def env(make_world):
    return make_world("sockex2", "vanilla").analysis_env()


def analyze(text, env):
    return check_and_analyze(isa.assemble(text), env)


def test_context_load(env):
    analysis = analyze("ldxw r2, [r1+4]\nexit", env)
    access = analysis.access_set.accesses[0]
    assert (access.region, access.off, access.width, access.kind) == (CTX, 4, 4, "load")
    assert access.component == "private"
    assert analysis.access_set.ctx_reads == [(4, 8)]
    assert analysis.provenance[1].regs[2] == Prov(SCALAR)
    assert analysis.provenance[0].regs[1] == Prov(CTX, 0)


def test_stack_store_through_copy_of_frame(env):
    analysis = analyze("mov64 r3, r10\nadd64 r3, -8\nstxdw [r3+0], r0\nexit", env)
    access = analysis.access_set.accesses[2]
    assert (access.region, access.off, access.kind) == (STACK, -8, "store")
    assert access.component == "private"


def test_map_value_classification(make_world):
    env = make_world("sockex1", "vanilla").analysis_env()
    analysis = analyze(
        "mov64 r1, 1\nmov64 r2, 0\ncall 1\njeq r0, 0, +1\nldxw r3, [r0+0]\nmov64 r0, 0\nexit", env)
    access = analysis.access_set.accesses[4]
    assert access.region == MAP
    assert access.component == "map:1"
    assert analysis.access_set.by_component() == {"map:1": 1}


def test_nested_reference(env):
    analysis = analyze("ldxdw r2, [r1+32]\nldxw r3, [r2+4]\nmov64 r0, 0\nexit", env)
    assert analysis.access_set.accesses[1].level == "flow"
    assert analysis.access_set.fields(env.spec, "flow") == ["dst"]


def test_helper_buffers_count_as_reads(env):
    analysis = analyze("mov64 r2, 8\ncall 3\nmov64 r0, 0\nexit", env)
    assert analysis.access_set.fields(env.spec) == ["len", "protocol"]
    assert analysis.access_set.accesses == {}


@pytest.mark.parametrize("text,error", [
    ("add64 r1, r10\nmov64 r0, 0\nexit", PointerPlusPointer),
    ("mov64 r0, 0\nja -2\nexit", BackwardJump),
    ("mov64 r0, 0", FallOffEnd),
    ("ja +1\nmov64 r0, 1\nmov64 r0, 0\nexit", UnreachableInstruction),
    ("mov64 r10, 0\nexit", FrameRegisterWrite),
    ("mov64 r2, 4096\nldxw r0, [r2+0]\nexit", UnknownBaseAccess),
    ("stxdw [r10+0], r0\nexit", StackOutOfBounds),
    ("ldxw r0, [r10-516]\nexit", StackOutOfBounds),
    ("ldxw r2, [r1+36]\nmov64 r0, 0\nexit", InvalidContextAccess),
    ("ldxw r2, [r1+28]\nmov64 r0, 0\nexit", InvalidContextAccess),
    ("stxdw [r1+32], r0\nmov64 r0, 0\nexit", InvalidContextAccess),
    ("stxw [r1+8], r10\nmov64 r0, 0\nexit", PointerLeak),
    ("mov64 r0, r10\nexit", PointerLeak),
])
def test_rejections(env, text, error):
    with pytest.raises(error):
        analyze(text, env)


def test_rejection_carries_pc(env):
    with pytest.raises(PointerPlusPointer) as e:
        analyze("mov64 r0, 0\nadd64 r1, r10\nexit", env)
    assert e.value.pc == 1


def test_reserved_registers():
    program = isa.Program([isa.alu64_imm("mov", 11, 0), isa.exit_insn()])
    with pytest.raises(ReservedRegister):
        check_and_analyze(program)


def test_instruction_limit():
    body = [isa.alu64_imm("mov", 0, 0)] * 4096 + [isa.exit_insn()]
    with pytest.raises(TooManyInstructions):
        check_and_analyze(isa.Program(body))
    check_and_analyze(isa.Program(body[1:]))
    check_and_analyze(isa.Program(body, privilege="privileged"))


def test_no_context():
    with pytest.raises(InvalidContextAccess):
        check_and_analyze(isa.assemble("ldxw r2, [r1+0]\nmov64 r0, 0\nexit"), AnalysisEnv())


def test_variable_context_offset(env):
    analysis = analyze(
        "ldxw r2, [r1+0]\nand64 r2, 4\nadd64 r1, r2\nldxw r3, [r1+0]\nmov64 r0, 0\nexit", env)
    assert "" in analysis.access_set.variable
    with pytest.raises(VariableContextOffset):
        require_constant_context(analysis)


def test_branch_join_keeps_equal_pointers(env):
    analysis = analyze(
        "mov64 r3, r10\njeq r2, 0, +1\nmov64 r4, 1\nstxdw [r3-8], r4\nmov64 r0, 0\nexit", env)
    assert analysis.provenance[3].regs[3] == Prov(STACK, 0)
    assert analysis.access_set.accesses[3].region == STACK


@pytest.mark.parametrize("text,pc", [
    # same region, different offsets
    ("mov64 r6, r1\nmov64 r2, 0\njeq r2, 0, +1\nadd64 r6, 4\nldxw r0, [r6+0]\nexit", 4),
    ("mov64 r3, r10\njeq r2, 0, +1\nadd64 r3, -8\nstxdw [r3-8], r2\nmov64 r0, 0\nexit", 3),
    # different regions
    ("mov64 r3, r10\njeq r2, 0, +1\nmov64 r3, r1\nldxw r0, [r3+0]\nexit", 3),
])
def test_unequal_pointers_join_to_unknown(env, text, pc):
    with pytest.raises(UnknownBaseAccess) as e:
        analyze(text, env)
    assert e.value.pc == pc


def test_joined_pointer_can_be_rebuilt(env):
    analysis = analyze(
        "mov64 r6, r1\njeq r2, 0, +1\nadd64 r6, 4\nmov64 r6, r1\nldxw r0, [r6+4]\nexit", env)
    assert analysis.access_set.accesses[4].region == CTX
