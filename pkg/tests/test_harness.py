# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import numpy as np
import pytest

from bpfbox import isa
from bpfbox.engine import CATEGORIES, MODES
from bpfbox.harness import (
    BENCH_COLUMNS,
    HarnessError,
    TrialRecord,
    compare_context,
    inject_faults,
    pick_target,
    render_table,
    run_microbench,
)
from bpfbox.logger import PD_Stats

from conftest import scenario_config


def _campaign(make_world, mode, trials, seed=7, targets="uniform", scenario="sockex2"):
    world = make_world(scenario, mode)
    (program, core), = world.load_programs()[:1]
    return inject_faults(program, world, trials, seed, targets=targets, core_id=core, log_every=0)


def test_sfi_contains_everything(make_world):
    report = _campaign(make_world, "sfi", 50)
    assert report.trials == 50
    assert report.contained == 50
    assert report.escapes == 0
    assert not report.secret_leaked
    assert report.arena_digest_match


def test_mte_faults_everything(make_world):
    report = _campaign(make_world, "mte", 50)
    assert report.escapes == 0
    assert report.outcomes["faulted"] == 50
    assert set(report.fault_kinds) == {"TagMismatch"}


def test_vanilla_escapes_on_sentinel(make_world):
    report = _campaign(make_world, "vanilla", 50, targets="sentinel")
    assert report.escapes >= 1
    assert report.contained + report.escapes == 50


def test_campaign_is_seeded(make_world):
    first = _campaign(make_world, "sfi", 20, seed=3)
    second = _campaign(make_world, "sfi", 20, seed=3)
    assert first.records == second.records
    assert first.as_dict() == second.as_dict()


def test_report_frame(make_world):
    report = _campaign(make_world, "sfi", 10)
    frame = report.to_frame()
    assert list(frame.columns) == list(TrialRecord._fields)
    assert len(frame) == 10
    assert set(frame["outcome"]) <= {"redirected", "faulted"}
    assert "records" in report.as_dict(records=True)


def test_campaign_fills_stats(make_world, tmp_path):
    world = make_world("sockex1", "sfi")
    (program, core), = world.load_programs()
    stats = PD_Stats(str(tmp_path / "stats.pkl"), TrialRecord._fields)
    inject_faults(program, world, 5, 1, core_id=core, log_every=0, stats=stats)
    assert len(stats.stats) == 5


def test_targets_avoid_components(make_world):
    world = make_world("sockex2", "sfi")
    rng = np.random.RandomState(0)
    secret, length = world.secret
    for width in (1, 2, 4, 8):
        for _ in range(50):
            addr = pick_target(world, rng, width)
            assert addr % width == 0
            for start, size in world.target_exclusions():
                assert not start <= addr < start + size
        addr = pick_target(world, rng, width, "sentinel")
        assert secret <= addr < secret + length


def test_unknown_target_distribution(make_world):
    world = make_world("sockex2", "sfi")
    (program, _), = world.load_programs()
    with pytest.raises(HarnessError):
        inject_faults(program, world, 1, 0, targets="edges")


@pytest.mark.slow
@pytest.mark.parametrize("mode", ["sfi", "mte"])
def test_full_campaign(make_world, mode):
    report = _campaign(make_world, mode, 10000)
    assert report.escapes == 0
    assert report.contained == 10000


def test_microbench_table():
    configs = [scenario_config("sockex2"), scenario_config("vfs")]
    table = run_microbench(configs, MODES, repetitions=2)
    assert list(table.columns) == list(BENCH_COLUMNS)
    # one sockex2 program and the vfs pair
    assert len(table) == 3 * len(MODES)
    vanilla = table[table["mode"] == "vanilla"]
    assert (vanilla[["context", "tagging", "sandbox", "access"]] == 0).all().all()
    sfi = table[table["mode"] == "sfi"]
    assert (sfi["static_checks"] == 2 * sfi["guarded_accesses"]).all()
    assert (table["total"] == table[list(CATEGORIES)].sum(axis=1)).all()
    assert render_table(table).splitlines()[0].split()[:3] == ["scenario", "program", "mode"]


def test_context_comparison():
    frame = compare_context(scenario_config("sockex2"))
    row = frame.iloc[0]
    assert row["fields_partial"] < row["fields_full"]
    assert row["bytes_partial"] < row["bytes_full"]
    assert row["context_partial"] <= row["context_full"]


def test_injected_program_is_marked(make_world):
    from bpfbox.harness import injection_sequence, insert_injection
    from bpfbox.analyze import check_and_analyze

    world = make_world("sockex2", "vanilla")
    (program, _), = world.load_programs()
    analysis = check_and_analyze(program, world.analysis_env())
    seq = injection_sequence("store", 4, world.secret[0], canary=5)
    injected, _, _ = insert_injection(program, analysis, 0, seq)
    assert len(injected) == len(program) + len(seq)
    assert injected.count(isa.Origin.INJECTED) == len(seq)
