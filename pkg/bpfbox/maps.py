# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Array maps. The value region is a power-of-two, self-aligned block so that a
single mask pair confines guest accesses to it; the map's bookkeeping lives
in a separate kernel block the mask can never reach.
"""

import threading
from logging import getLogger

from bpfbox.errors import BpfBoxError
from bpfbox.instrument import compute_masks
from bpfbox.memory import GRANULE, with_tag, untagged
from bpfbox.sandbox import TAGGED_MODES
from bpfbox.utils import U64, next_power_of_two

logger = getLogger()

METADATA_SIZE = 16
# metadata block: refcount u32 @0, lock token u32 @4, value_size u32 @8, max_entries u32 @12


class MapError(BpfBoxError):
    pass


class ZeroSized(MapError):
    pass


class LengthMismatch(MapError):
    pass


class UnknownMap(MapError):
    pass


def region_size_for(value_size, max_entries):
    return max(GRANULE, next_power_of_two(value_size * max_entries))


class MapDescriptor(object):
    def __init__(self, space, map_id, value_size, max_entries, base, region_size,
                 metadata_addr, tag=None):
        self.space = space
        self.map_id = map_id
        self.value_size = value_size
        self.max_entries = max_entries
        self.base = base
        self.region_size = region_size
        self.metadata_addr = metadata_addr
        self.mask = compute_masks(base, region_size)
        self.tag = tag
        self._lock = threading.Lock()

    def __repr__(self):
        return "MapDescriptor(id=%i, %ix%i, base=0x%x, region=%i)" % (
            self.map_id, self.value_size, self.max_entries, self.base, self.region_size)

    @property
    def refcount(self):
        return self.space.read(self.metadata_addr, 4)

    def contains(self, addr, length=1):
        a = untagged(addr)
        return self.base <= a and a + length <= self.base + self.region_size

    def lookup(self, index):
        """Address of element `index`, or 0 when the index is out of range."""
        if not 0 <= index < self.max_entries:
            return 0
        addr = self.base + index * self.value_size
        if self.tag is not None:
            addr = with_tag(addr, self.tag)
        return addr

    def update(self, index, value):
        value = bytes(value)
        if len(value) != self.value_size:
            raise LengthMismatch(
                "map %i stores %i-byte values, got %i bytes" % (self.map_id, self.value_size, len(value))
            )
        if not 0 <= index < self.max_entries:
            return False
        with self._lock:
            self.space.write_bytes(self.base + index * self.value_size, value)
        return True

    def read(self, index):
        with self._lock:
            return self.space.read_bytes(self.base + index * self.value_size, self.value_size)

    def contents(self):
        return self.space.read_bytes(self.base, self.value_size * self.max_entries)


def create_array_map(space, map_id, value_size, max_entries, mode, sandbox_tag):
    if value_size < 1 or max_entries < 1:
        raise ZeroSized("map %i: value_size and max_entries must be positive" % map_id)
    region_size = region_size_for(value_size, max_entries)
    base = space.reserve(region_size, align=region_size, name="map-%i" % map_id)
    metadata = space.reserve(METADATA_SIZE, align=GRANULE, name="map-%i-meta" % map_id)
    space.zero(base, region_size)
    space.zero(metadata, METADATA_SIZE)
    space.write(metadata, 4, 1)
    space.write(metadata + 8, 4, value_size)
    space.write(metadata + 12, 4, max_entries)
    tag = None
    if mode in TAGGED_MODES:
        tag = sandbox_tag
        space.set_tag_range(base, region_size, sandbox_tag)
    desc = MapDescriptor(space, map_id, value_size, max_entries, base, region_size, metadata, tag)
    logger.debug("created %r" % desc)
    return desc


def map_lookup(desc, index):
    return desc.lookup(index)


def map_update(desc, index, value):
    """Returns 0, or all ones when the index misses, like the helper does."""
    return 0 if desc.update(index, value) else U64


class MapRegistry(object):
    """Maps shared by every engine running against one address space."""

    def __init__(self, space):
        self.space = space
        self._maps = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._maps)

    def __iter__(self):
        return iter(sorted(self._maps.values(), key=lambda d: d.map_id))

    def __contains__(self, map_id):
        return map_id in self._maps

    def create(self, map_id, value_size, max_entries, mode, sandbox_tag):
        with self._lock:
            if map_id in self._maps:
                raise MapError("map %i declared twice" % map_id)
            desc = create_array_map(self.space, map_id, value_size, max_entries, mode, sandbox_tag)
            self._maps[map_id] = desc
        return desc

    def get(self, map_id):
        try:
            return self._maps[map_id]
        except KeyError:
            raise UnknownMap("no map with id %r" % map_id)

    def find(self, addr, length=1):
        for desc in self._maps.values():
            if desc.contains(addr, length):
                return desc
        return None

    def components(self):
        return {"map:%i" % d.map_id: d.mask for d in self}

    def regions(self):
        return [(d.base, d.region_size) for d in self]

    def snapshot(self):
        return {d.map_id: d.contents() for d in self}

    def clone(self, space):
        other = MapRegistry(space)
        for d in self:
            other._maps[d.map_id] = MapDescriptor(
                space, d.map_id, d.value_size, d.max_entries, d.base, d.region_size,
                d.metadata_addr, d.tag,
            )
        return other
