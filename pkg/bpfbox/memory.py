# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Simulated kernel address space: a flat byte arena at a fixed virtual base,
a 4-bit memory tag per 16-byte granule, and tagged addresses carrying a
pointer tag in bits 56-59.
"""

import bisect
import hashlib
from logging import getLogger

import numpy as np

from bpfbox.errors import BpfBoxError, GuestFault, TagMismatch
from bpfbox.utils import U64

logger = getLogger()

KERNEL_BASE = 0x4000_0000_0000
DEFAULT_ARENA_SIZE = 1 << 20
GRANULE = 16
TAG_SHIFT = 56
TAG_BITS = 0xF << TAG_SHIFT
# top-byte-ignore: bits 48-63 never take part in arena indexing
ADDRESS_BITS = (1 << 48) - 1

DEFAULT_MEM_TAG = 0xE
DEFAULT_SANDBOX_TAG = 0x4
MATCH_ALL_TAG = 0xF

GUEST = "guest"
HOST = "host"


class MemoryModelError(BpfBoxError):
    pass


class OutOfArena(MemoryModelError, GuestFault):
    kind = "OutOfArena"


class NotGranuleAligned(MemoryModelError):
    pass


class NotGranuleMultiple(MemoryModelError):
    pass


class ArenaExhausted(MemoryModelError):
    pass


class UnsupportedTagMode(MemoryModelError):
    pass


def tag_of(addr):
    return (addr >> TAG_SHIFT) & 0xF


def strip_tag(addr):
    return addr & ~TAG_BITS & U64


def with_tag(addr, tag):
    return (addr & ~TAG_BITS & U64) | ((tag & 0xF) << TAG_SHIFT)


def untagged(addr):
    return addr & ADDRESS_BITS


class TaggedAddress(int):
    """A 64-bit simulated virtual address with its MTE view."""

    def __new__(cls, value, tag=None):
        value &= U64
        if tag is not None:
            value = with_tag(value, tag)
        return super(TaggedAddress, cls).__new__(cls, value)

    @property
    def value(self):
        return int(self)

    @property
    def tag(self):
        return tag_of(self)

    @property
    def untagged(self):
        return untagged(self)

    def __repr__(self):
        return "TaggedAddress(0x%x, tag=0x%x)" % (int(self), self.tag)


class TagPolicy(object):
    """
    How tags are checked. Only synchronous checking is modelled: a mismatch
    faults before any byte moves. Host accesses (engine, helpers) bypass the
    check the way the kernel's match-all tag does; guest accesses never do.
    """

    OFF = "off"
    SYNC = "sync"
    REJECTED = ("async", "asymmetric", "asymm")

    def __init__(self, mode=OFF, sandbox_tag=DEFAULT_SANDBOX_TAG,
                 kernel_matchall_tag=MATCH_ALL_TAG):
        if mode in self.REJECTED:
            raise UnsupportedTagMode("unsupported tag check mode: %s" % mode)
        if mode not in (self.OFF, self.SYNC):
            raise UnsupportedTagMode("unknown tag check mode: %s" % mode)
        if not 0 <= sandbox_tag <= 0xF:
            raise UnsupportedTagMode("sandbox tag out of range: %r" % sandbox_tag)
        self.mode = mode
        self.sandbox_tag = sandbox_tag
        self.kernel_matchall_tag = kernel_matchall_tag

    @property
    def checking(self):
        return self.mode == self.SYNC

    def __repr__(self):
        return "TagPolicy(mode=%s, sandbox_tag=0x%x)" % (self.mode, self.sandbox_tag)


class SimAddressSpace(object):
    def __init__(self, arena_size=DEFAULT_ARENA_SIZE, base=KERNEL_BASE,
                 default_mem_tag=DEFAULT_MEM_TAG):
        assert base % 4096 == 0 and tag_of(base) == 0
        if arena_size <= 0 or arena_size % 4096:
            raise MemoryModelError("arena size must be a positive multiple of 4096")
        self.base = base
        self.size = arena_size
        self.default_mem_tag = default_mem_tag
        self.arena = np.zeros(arena_size, dtype=np.uint8)
        self.tags = np.full(arena_size // GRANULE, default_mem_tag, dtype=np.uint8)
        self._mem = self.arena.data
        # sorted, non-overlapping (start, end, name) reservations
        self._regions = []

    @property
    def end(self):
        return self.base + self.size

    def contains(self, addr, length=1):
        a = untagged(addr)
        return self.base <= a and a + length <= self.end

    def _index(self, addr, length):
        a = untagged(addr)
        off = a - self.base
        if off < 0 or off + length > self.size:
            raise OutOfArena("access of %i bytes at 0x%x outside the arena" % (length, addr),
                             addr=addr)
        return off

    def _check(self, addr, off, length):
        ptr_tag = tag_of(addr)
        for g in range(off >> 4, ((off + length - 1) >> 4) + 1):
            mem_tag = int(self.tags[g])
            if mem_tag != ptr_tag:
                raise TagMismatch(addr, ptr_tag, mem_tag)

    # ============ accesses ... ============

    def read(self, addr, length, policy=None, context=HOST):
        off = self._index(addr, length)
        if context == GUEST and policy is not None and policy.checking:
            self._check(addr, off, length)
        return int.from_bytes(self._mem[off:off + length], "little")

    def write(self, addr, length, value, policy=None, context=HOST):
        off = self._index(addr, length)
        if context == GUEST and policy is not None and policy.checking:
            self._check(addr, off, length)
        self._mem[off:off + length] = (value & ((1 << (8 * length)) - 1)).to_bytes(length, "little")

    def read_bytes(self, addr, length):
        off = self._index(addr, length)
        return bytes(self._mem[off:off + length])

    def write_bytes(self, addr, data):
        off = self._index(addr, len(data))
        self._mem[off:off + len(data)] = bytes(data)

    def zero(self, addr, length):
        off = self._index(addr, length)
        self.arena[off:off + length] = 0

    def fill_random(self, rng):
        """Fill the arena with seeded bytes standing in for live kernel data."""
        self.arena[:] = rng.randint(0, 256, size=self.size, dtype=np.uint8)

    # ============ tags ... ============

    def get_tag(self, addr):
        return int(self.tags[self._index(addr, 1) >> 4])

    def set_tag_range(self, addr, length, tag):
        a = untagged(addr)
        if a % GRANULE:
            raise NotGranuleAligned("0x%x is not 16-byte aligned" % a)
        if length <= 0 or length % GRANULE:
            raise NotGranuleMultiple("length %i is not a positive multiple of 16" % length)
        if not 0 <= tag <= 0xF:
            raise MemoryModelError("tag out of range: %r" % tag)
        off = self._index(a, length)
        self.tags[off >> 4:(off + length) >> 4] = tag

    def get_tags(self, addr, length):
        off = self._index(addr, length)
        return self.tags[off >> 4:(off + length + GRANULE - 1) >> 4].copy()

    def restore_tags(self, addr, saved):
        off = self._index(addr, len(saved) * GRANULE)
        self.tags[off >> 4:(off >> 4) + len(saved)] = saved

    # ============ containment digest ... ============

    def snapshot(self, exclude=()):
        """
        Digest of every arena byte outside the excluded (addr, length) ranges.
        """
        spans = []
        for addr, length in exclude:
            start = max(untagged(addr) - self.base, 0)
            stop = min(untagged(addr) - self.base + length, self.size)
            if start < stop:
                spans.append((start, stop))
        spans.sort()
        digest = hashlib.blake2b(digest_size=16)
        pos = 0
        for start, stop in spans:
            if start > pos:
                digest.update(pos.to_bytes(8, "little"))
                digest.update(self._mem[pos:start])
            pos = max(pos, stop)
        if pos < self.size:
            digest.update(pos.to_bytes(8, "little"))
            digest.update(self._mem[pos:self.size])
        return digest.hexdigest()

    # ============ kernel allocator ... ============

    def reserve(self, size, align=16, name=""):
        """First-fit reservation of an aligned range of kernel memory."""
        if size <= 0:
            raise MemoryModelError("cannot reserve %i bytes" % size)
        cursor = self.base
        for start, end, _ in self._regions + [(self.end, self.end, None)]:
            candidate = (cursor + align - 1) // align * align
            if candidate + size <= start:
                return self._insert(candidate, size, name)
            cursor = max(cursor, end)
        raise ArenaExhausted("no room for %i bytes (%s) in the arena" % (size, name))

    def reserve_at(self, addr, size, name=""):
        a = untagged(addr)
        if not self.contains(a, size):
            raise ArenaExhausted("range 0x%x+%i lies outside the arena" % (a, size))
        for start, end, other in self._regions:
            if a < end and start < a + size:
                raise ArenaExhausted("range 0x%x+%i overlaps %s" % (a, size, other))
        return self._insert(a, size, name)

    def _insert(self, addr, size, name):
        bisect.insort(self._regions, (addr, addr + size, name))
        logger.debug("reserved 0x%x+%i for %s" % (addr, size, name))
        return addr

    def regions(self):
        return list(self._regions)

    def clone(self):
        other = SimAddressSpace.__new__(SimAddressSpace)
        other.base = self.base
        other.size = self.size
        other.default_mem_tag = self.default_mem_tag
        other.arena = self.arena.copy()
        other.tags = self.tags.copy()
        other._mem = other.arena.data
        other._regions = list(self._regions)
        return other
