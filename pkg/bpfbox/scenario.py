# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Scenario configs and the worlds built from them.

A scenario is one JSON document describing the kernel a program runs
against: object types and instances, the context mirrored from a root
object, maps, helpers, a planted secret and the programs to load. A World
is that kernel laid out in a SimAddressSpace for one mode.
"""

import json
import os
from logging import getLogger

import numpy as np

from bpfbox.analyze import AnalysisEnv
from bpfbox.context import (
    MTE_MIN_TAGS,
    REFERENCE,
    ContextSpec,
    KernelObjectDescriptor,
    KernelObjects,
    TagPool,
    object_levels,
)
from bpfbox.engine import CostTable, check_mode
from bpfbox.errors import BpfBoxError
from bpfbox.isa import load_program
from bpfbox.maps import METADATA_SIZE as MAP_METADATA_SIZE
from bpfbox.maps import MapRegistry
from bpfbox.memory import (
    DEFAULT_MEM_TAG,
    DEFAULT_SANDBOX_TAG,
    SimAddressSpace,
    TagPolicy,
    untagged,
)
from bpfbox.sandbox import PAGE_SIZE, SandboxPool

logger = getLogger()

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "scenarios")
BUILTIN_PREFIX = "builtin:"
BUILTIN_SCENARIOS = ("sockfilter", "sockex1", "sockex2", "ddos", "vfs")

KERNEL_STACK_SIZE = 512
DEFAULT_SECRET_LEN = 64
DEFAULT_HELPERS = (1, 2, 3, 4, 5, 6)


class ScenarioError(BpfBoxError):
    pass


class UnknownScenario(ScenarioError):
    pass


def load_scenario(name):
    """Read a scenario from a JSON path or ``builtin:<name>``."""
    if name.startswith(BUILTIN_PREFIX):
        short = name[len(BUILTIN_PREFIX):]
        if short not in BUILTIN_SCENARIOS:
            raise UnknownScenario("no builtin scenario %r (have %s)"
                                  % (short, ", ".join(BUILTIN_SCENARIOS)))
        path = os.path.join(SCENARIO_DIR, short + ".json")
    else:
        path = name
    if not os.path.isfile(path):
        raise UnknownScenario("scenario file %s does not exist" % path)
    try:
        with open(path, "r") as f:
            config = json.load(f)
    except ValueError as e:
        raise ScenarioError("%s is not valid JSON: %s" % (path, e))
    config.setdefault("name", os.path.splitext(os.path.basename(path))[0])
    config["_dir"] = os.path.dirname(os.path.abspath(path))
    return config


def builtin_scenarios():
    return [load_scenario(BUILTIN_PREFIX + name) for name in BUILTIN_SCENARIOS]


class Clock(object):
    """Monotonic counter behind get_time."""

    def __init__(self, start=0, step=1):
        self.now = start
        self.step = step

    def tick(self):
        self.now += self.step
        return self.now

    def clone(self):
        other = Clock(self.now, self.step)
        return other


class World(object):
    def __init__(self, config, mode):
        self.config = config
        self.mode = mode
        self.name = config.get("name", "scenario")
        self.space = None
        self.policy = None
        self.objects = None
        self.spec = None
        self.root = None
        self.levels = {}
        self.maps = None
        self.pool = None
        self.tag_pool = None
        self.kernel_stacks = {}
        self.secret = None
        self.clock = None
        self.rng = None
        self.costs = None
        self.helpers_enabled = frozenset()

    def __repr__(self):
        return "World(%s, %s)" % (self.name, self.mode)

    @property
    def cores(self):
        return sorted(self.kernel_stacks)

    def kernel_stack_top(self, core_id):
        try:
            return self.kernel_stacks[core_id] + KERNEL_STACK_SIZE
        except KeyError:
            raise ScenarioError("scenario %s has no core %i" % (self.name, core_id))

    def kernel_stack_contains(self, core_id, addr, length=1):
        base = self.kernel_stacks.get(core_id)
        a = untagged(addr)
        return base is not None and base <= a and a + length <= base + KERNEL_STACK_SIZE

    def object_containing(self, addr, length=1):
        a = untagged(addr)
        for obj in self.objects:
            if obj.addr <= a and a + length <= obj.addr + obj.size:
                return obj
        return None

    def prandom(self):
        return int(self.rng.randint(0, 1 << 32, dtype=np.int64))

    def secret_bytes(self):
        addr, length = self.secret
        return self.space.read_bytes(addr, length)

    def components(self, core_id=0):
        """Mask pairs a program on `core_id` may reach, keyed by component."""
        comps = {"private": self.pool.page_for(core_id).mask}
        comps.update(self.maps.components())
        return comps

    def analysis_env(self):
        return AnalysisEnv(self.spec, {d.map_id: d.value_size for d in self.maps})

    # ============ containment bookkeeping ... ============

    def mirrored_fields(self, writable_only=False):
        """Kernel (addr, size) of every field the context mirrors."""
        if self.root is None:
            return []
        ranges = []
        for obj, level in self.levels.values():
            for f in self.spec.level(level):
                if writable_only and not f.writable:
                    continue
                kaddr, _ = self.objects.resolve(obj, f.path)
                ranges.append((kaddr, f.size))
        return ranges

    def component_ranges(self):
        ranges = [(page, PAGE_SIZE) for page in self.pool.pages()]
        for d in self.maps:
            ranges.append((d.base, d.region_size))
            ranges.append((d.metadata_addr, MAP_METADATA_SIZE))
        ranges.extend((base, KERNEL_STACK_SIZE) for base in self.kernel_stacks.values())
        return ranges

    def digest_exclusions(self):
        """Ranges a contained program may legitimately change."""
        return self.component_ranges() + self.mirrored_fields(writable_only=True)

    def target_exclusions(self):
        """Ranges fault injection never aims at."""
        return self.component_ranges() + self.mirrored_fields()

    def digest(self):
        return self.space.snapshot(self.digest_exclusions())

    # ============ programs ... ============

    def load_programs(self):
        programs = []
        context_type = self.spec.name if self.spec is not None else None
        for entry in self.config.get("programs", []):
            path = entry["file"]
            if not os.path.isabs(path):
                path = os.path.join(self.config.get("_dir", "."), path)
            program = load_program(path, entry.get("privilege", "unprivileged"), context_type)
            program.name = entry.get("name", os.path.basename(path))
            programs.append((program, entry.get("core", 0)))
        return programs

    def clone(self):
        """An independent copy sharing nothing mutable with this world."""
        other = World(self.config, self.mode)
        other.space = self.space.clone()
        other.policy = self.policy
        other.objects = self.objects.clone(other.space)
        other.spec = self.spec
        other.root = self.root
        other.levels = dict(self.levels)
        other.maps = self.maps.clone(other.space)
        other.pool = self.pool.clone(other.space)
        other.tag_pool = self.tag_pool.clone()
        other.kernel_stacks = dict(self.kernel_stacks)
        other.secret = self.secret
        other.clock = self.clock.clone()
        other.rng = np.random.RandomState()
        other.rng.set_state(self.rng.get_state())
        other.costs = self.costs
        other.helpers_enabled = self.helpers_enabled
        return other


def _build_objects(world, config):
    objects = KernelObjects(world.space)
    for d in config.get("descriptors", []):
        objects.add_descriptor(KernelObjectDescriptor(d["name"], d["size"], d["fields"]))
    instances = config.get("kernel_objects", [])
    # references may point forward, so allocate everything before any value is set
    for inst in instances:
        objects.allocate(inst["name"], inst["type"])
    for inst in instances:
        obj = objects.get(inst["name"])
        for name, value in inst.get("values", {}).items():
            objects.set_field(obj, name, value)
    for obj in objects:
        for f in obj.descriptor.fields:
            if f.kind == REFERENCE and not objects.read_field(obj, f.name):
                logger.debug("%s.%s left null" % (obj.name, f.name))
    return objects


def build_world(config, mode):
    """Lay out the scenario's kernel in a fresh address space for `mode`."""
    check_mode(mode)
    world = World(config, mode)
    sandbox_tag = config.get("sandbox_tag", DEFAULT_SANDBOX_TAG)
    default_tag = config.get("default_mem_tag", DEFAULT_MEM_TAG)
    if sandbox_tag == default_tag:
        raise ScenarioError("sandbox tag and default memory tag must differ")
    seed = config.get("seed", 0)
    world.rng = np.random.RandomState(seed)

    space = SimAddressSpace(config.get("arena_size", 1 << 18), default_mem_tag=default_tag)
    space.fill_random(world.rng)
    world.space = space
    world.policy = TagPolicy(
        TagPolicy.SYNC if mode in ("mte", "mte-min") else TagPolicy.OFF, sandbox_tag=sandbox_tag
    )

    secret = config.get("secret", {})
    length = secret.get("len", DEFAULT_SECRET_LEN)
    hint = secret.get("addr_hint")
    if hint is None:
        addr = space.reserve(length, name="secret")
    else:
        addr = space.reserve_at(hint if hint >= space.base else space.base + hint, length, "secret")
    space.write_bytes(addr, world.rng.randint(0, 256, size=length, dtype=np.uint8).tobytes())
    world.secret = (addr, length)

    try:
        world.objects = _build_objects(world, config)
        ctx = config.get("context")
        if ctx is not None:
            world.spec = ContextSpec.from_dict(ctx)
            world.spec.validate(world.objects)
            world.root = world.objects.get(ctx["object"])
            if world.root.descriptor.name != world.spec.root:
                raise ScenarioError("context object %s is a %s, not a %s"
                                    % (world.root.name, world.root.descriptor.name, world.spec.root))
            world.levels = object_levels(world.objects, world.root, world.spec)
    except (KeyError, TypeError) as e:
        raise ScenarioError("malformed scenario %s: %r" % (world.name, e))

    world.maps = MapRegistry(space)
    for m in config.get("maps", []):
        world.maps.create(m["id"], m["value_size"], m["max_entries"], mode, sandbox_tag)

    world.pool = SandboxPool(space, sandbox_tag, config.get("max_sandboxes"))
    for core in range(config.get("cores", 1)):
        world.kernel_stacks[core] = space.reserve(KERNEL_STACK_SIZE, name="kstack-%i" % core)
        space.zero(world.kernel_stacks[core], KERNEL_STACK_SIZE)
        world.pool.preallocate(core)

    world.tag_pool = TagPool(t for t in MTE_MIN_TAGS if t not in (sandbox_tag, default_tag))
    clock = config.get("clock", {})
    world.clock = Clock(clock.get("start", 0), clock.get("step", 1))
    world.costs = CostTable.from_dict(config.get("costs"))
    world.helpers_enabled = frozenset(config.get("helpers_enabled", DEFAULT_HELPERS))
    logger.debug("built %r: %i objects, %i maps, secret at 0x%x"
                 % (world, len(world.objects.ranges()), len(world.maps), addr))
    return world
