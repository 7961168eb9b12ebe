# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import pytest

from bpfbox import isa
from bpfbox.analyze import check_and_analyze
from bpfbox.engine import MODES, Engine
from bpfbox.harness import verify_transparency
from bpfbox.reference import run_reference
from bpfbox.scenario import BUILTIN_SCENARIOS
from bpfbox.synth import synthesize

from conftest import scenario_config


@pytest.mark.parametrize("scenario", BUILTIN_SCENARIOS)
def test_reference_matches_engine_on_builtins(make_world, scenario):
    ref_world = make_world(scenario, "vanilla")
    expected = [run_reference(p, ref_world) for p, _ in ref_world.load_programs()]
    assert all(r.status == "completed" and not r.out_of_bounds for r in expected)
    for mode in MODES:
        world = make_world(scenario, mode)
        got = [Engine(world, mode, core).run(p) for p, core in world.load_programs()]
        assert [(r.r0, r.log) for r in got] == [(r.r0, r.log) for r in expected]
        assert world.maps.snapshot() == ref_world.maps.snapshot()


def test_reference_stack_bounds(make_world, asm):
    world = make_world("sockex2", "vanilla")
    result = run_reference(asm("stdw [r10-520], 1\nmov64 r0, 0\nexit", world), world)
    assert result.status == "faulted"
    assert result.fault["pc"] == 0


def test_reference_write_back(make_world, program_path):
    world = make_world("sockfilter", "vanilla")
    program = isa.load_program(program_path("mark9000.asm"), context_type=world.spec.name)
    assert run_reference(program, world).status == "completed"
    assert world.objects.read_field(world.root, "mark") == 9000


@pytest.mark.parametrize("scenario", ["sockex2", "ddos", "vfs", "min.json"])
def test_synthesized_programs_load(make_world, scenario):
    world = make_world(scenario, "vanilla")
    for seed in range(20):
        program = synthesize(world, seed)
        assert program.name == "synth-%i" % seed
        check_and_analyze(program, world.analysis_env())
        result = run_reference(program, world.clone())
        assert result.status == "completed"
        assert not result.out_of_bounds


def test_synthesis_is_seeded(make_world):
    world = make_world("sockex1", "vanilla")
    first = isa.encode(synthesize(world, 11))
    assert first == isa.encode(synthesize(world, 11))
    assert first != isa.encode(synthesize(world, 12))


def test_transparency_small():
    configs = [scenario_config(name) for name in ("sockex2", "ddos")]
    report = verify_transparency(configs, programs=10, seed=3)
    assert report.programs == 20
    assert report.runs == 20 * len(MODES)
    assert report.agreed, report.disagreements


@pytest.mark.slow
def test_transparency_builtin():
    configs = [scenario_config(name) for name in BUILTIN_SCENARIOS]
    report = verify_transparency(configs, programs=1000, seed=0)
    assert report.agreed, report.disagreements[:5]


def _component(entry):
    return "map:%i" % entry.map_id if entry.region == "map" else "private"


def _check_classification(world, seeds):
    for seed in seeds:
        program = synthesize(world, seed)
        analysis = check_and_analyze(program, world.analysis_env())
        result = run_reference(program, world.clone())
        for entry in result.trace:
            access = analysis.access_set.accesses[entry.pc]
            assert access.component == _component(entry), (seed, entry)
            assert access.kind == entry.kind


@pytest.mark.parametrize("scenario", ["sockex1", "vfs"])
def test_analysis_classifies_every_concrete_access(make_world, scenario):
    _check_classification(make_world(scenario, "vanilla"), range(100))


@pytest.mark.slow
@pytest.mark.parametrize("scenario", BUILTIN_SCENARIOS)
def test_analysis_classification_full(make_world, scenario):
    _check_classification(make_world(scenario, "vanilla"), range(1000))
