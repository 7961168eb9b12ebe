# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import os

import pytest

from bpfbox import isa
from bpfbox.scenario import BUILTIN_PREFIX, build_world, load_scenario

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_DIR = os.path.join(ROOT, "configs")
PROGRAM_DIR = os.path.join(ROOT, "programs")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the full 10000-trial campaigns")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size fault-injection campaigns")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def scenario_config(name):
    if name.endswith(".json"):
        return load_scenario(os.path.join(CONFIG_DIR, name))
    return load_scenario(BUILTIN_PREFIX + name)


@pytest.fixture
def make_world():
    def make(name, mode):
        return build_world(scenario_config(name), mode)
    return make


@pytest.fixture
def asm():
    def assemble(text, world=None):
        context_type = world.spec.name if world is not None and world.spec is not None else None
        return isa.assemble(text, context_type=context_type)
    return assemble


@pytest.fixture
def program_path():
    return lambda name: os.path.join(PROGRAM_DIR, name)


@pytest.fixture
def config_path():
    return lambda name: os.path.join(CONFIG_DIR, name)
