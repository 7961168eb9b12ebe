# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import logging
import sys
from argparse import Namespace

from bpfbox.logger import LogFormatter, PD_Stats
from bpfbox.utils import run_tag


def record(msg, exc_info=None):
    return logging.LogRecord("bpfbox", logging.INFO, __file__, 1, msg, None, exc_info)


def test_tagged_prefix():
    line = LogFormatter("run/sfi").format(record("loaded sockex2"))
    assert line.startswith("INFO - ")
    assert " - [run/sfi] - loaded sockex2" in line


def test_untagged_prefix():
    line = LogFormatter().format(record("loaded"))
    assert "[" not in line
    assert line.endswith(" - loaded")
    assert LogFormatter().format(record("")) == ""


def test_continuation_lines_are_indented():
    first, second = LogFormatter("inject/mte").format(record("a\nb")).split("\n")
    assert first.endswith(" - a")
    assert second.strip() == "b"
    assert len(second) == len(first)


def test_traceback_is_appended():
    try:
        raise ValueError("bad scenario")
    except ValueError:
        exc_info = sys.exc_info()
    lines = LogFormatter("run/sfi").format(record("run failed", exc_info)).split("\n")
    assert lines[0].endswith(" - run failed")
    assert lines[1].strip().startswith("Traceback")
    assert lines[-1].strip() == "ValueError: bad scenario"


def test_run_tag():
    assert run_tag(Namespace(command="inject", mode="sfi")) == "inject/sfi"
    assert run_tag(Namespace(command="bench", modes=["sfi"])) == "bench"
    assert run_tag(Namespace()) is None


def test_stats_are_persisted(tmp_path):
    path = str(tmp_path / "stats.pkl")
    stats = PD_Stats(path, ("program", "r0"))
    stats.update({"program": "sockex1", "r0": 0})
    stats.update(["sockex2", 2])
    again = PD_Stats(path, ("program", "r0"))
    assert list(again.stats["r0"]) == [0, 2]
    assert "sockex2" in again.to_string()
