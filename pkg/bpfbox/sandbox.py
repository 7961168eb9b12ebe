# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Per-core sandbox pages.

One 4096-byte page per sandbox. The lower half holds metadata the guest can
never reach; the upper half is the guest partition:

    guest_base + 0          context copy (grows with the prepared context)
    context_end             heap (bump allocated, reset on release)
    guest_base + 1536       stack, 512 bytes, r10 starts at guest_base + 2048

Metadata partition layout (byte offsets from the page base):
    0   saved stack register
    8   heap bump (offset from guest_base)
    16  sync table reference
    24  and_mask
    32  or_mask
"""

import threading
from dataclasses import dataclass
from logging import getLogger

from bpfbox.errors import BpfBoxError
from bpfbox.memory import with_tag, untagged
from bpfbox.utils import U64, align_up, is_power_of_two

logger = getLogger()

PAGE_SIZE = 4096
METADATA_SIZE = 2048
GUEST_SIZE = 2048
STACK_SIZE = 512
HEAP_LIMIT = GUEST_SIZE - STACK_SIZE

META_SAVED_STACK = 0
META_HEAP_BUMP = 8
META_SYNC_TABLE = 16
META_AND_MASK = 24
META_OR_MASK = 32

TAGGED_MODES = ("mte", "mte-min")

assert METADATA_SIZE + GUEST_SIZE == PAGE_SIZE


class SandboxError(BpfBoxError):
    pass


class CoreBusy(SandboxError):
    pass


class SandboxPoolExhausted(SandboxError):
    pass


class OutOfSandboxMemory(SandboxError):
    pass


class ZeroAlloc(SandboxError):
    pass


class DoubleEnter(SandboxError):
    pass


class ExitWithoutEnter(SandboxError):
    pass


class InvalidMaskPair(SandboxError):
    pass


@dataclass(frozen=True)
class MaskPair:
    and_mask: int
    or_mask: int

    def __post_init__(self):
        if self.or_mask & self.and_mask:
            raise InvalidMaskPair("or_mask overlaps and_mask")
        if not is_power_of_two(self.and_mask + 1):
            raise InvalidMaskPair("and_mask + 1 is not a power of two")
        if self.or_mask % (self.and_mask + 1):
            raise InvalidMaskPair("or_mask is not aligned to the region size")

    @property
    def base(self):
        return self.or_mask

    @property
    def size(self):
        return self.and_mask + 1

    def apply(self, addr):
        return ((addr & self.and_mask) | self.or_mask) & U64

    def covers(self, addr, length=1):
        a = untagged(addr)
        return self.base <= a and a + length <= self.base + self.size


class Sandbox(object):
    def __init__(self, space, core_id, page_base):
        self.space = space
        self.core_id = core_id
        self.page_base = page_base
        self.guest_base = page_base + METADATA_SIZE
        self.mask = MaskPair(and_mask=GUEST_SIZE - 1, or_mask=self.guest_base)
        self.tag = None
        self.state = "free"
        self.entered = False
        self.context_end = 0
        self.sync_table = None
        self.last_core = core_id

    def __repr__(self):
        return "Sandbox(core=%i, page=0x%x, state=%s)" % (self.core_id, self.page_base, self.state)

    @property
    def metadata_base(self):
        return self.page_base

    @property
    def guest_end(self):
        return self.guest_base + GUEST_SIZE

    @property
    def stack_base(self):
        return self.guest_base + HEAP_LIMIT

    @property
    def stack_top(self):
        return self.guest_end

    def tagged(self, addr):
        """The guest's view of a partition address."""
        if self.tag is None:
            return addr
        return with_tag(addr, self.tag)

    def in_guest(self, addr, length=1):
        return self.mask.covers(addr, length)

    # ============ metadata partition ... ============

    def _meta_read(self, offset):
        return self.space.read(self.metadata_base + offset, 8)

    def _meta_write(self, offset, value):
        self.space.write(self.metadata_base + offset, 8, value)

    @property
    def heap_bump(self):
        return self._meta_read(META_HEAP_BUMP)

    @property
    def saved_stack_register(self):
        return self._meta_read(META_SAVED_STACK)

    def set_sync_table(self, table):
        self.sync_table = table
        self._meta_write(META_SYNC_TABLE, id(table) & U64 if table is not None else 0)

    # ============ heap ... ============

    def set_context_end(self, size):
        end = align_up(size, 8)
        if end > HEAP_LIMIT:
            raise OutOfSandboxMemory(
                "context of %i bytes does not fit the %i-byte guest budget" % (size, HEAP_LIMIT)
            )
        self.context_end = end
        self._meta_write(META_HEAP_BUMP, end)

    def heap_alloc(self, size):
        if size <= 0:
            raise ZeroAlloc("heap allocations must be at least one byte")
        bump = self.heap_bump
        rounded = align_up(size, 8)
        if bump + rounded > HEAP_LIMIT:
            raise OutOfSandboxMemory(
                "allocation of %i bytes at heap offset %i crosses the stack" % (size, bump)
            )
        self._meta_write(META_HEAP_BUMP, bump + rounded)
        return self.guest_base + bump

    # ============ prologue / epilogue ... ============

    def enter(self, frame_register):
        """Save the caller's stack register and return the guest's r10."""
        if self.state != "active":
            raise SandboxError("sandbox on core %i is not active" % self.core_id)
        if self.entered:
            raise DoubleEnter("sandbox on core %i already entered" % self.core_id)
        self._meta_write(META_SAVED_STACK, frame_register)
        self.entered = True
        return self.tagged(self.stack_top)

    def exit(self):
        if not self.entered:
            raise ExitWithoutEnter("sandbox on core %i was not entered" % self.core_id)
        self.entered = False
        return self._meta_read(META_SAVED_STACK)


class SandboxPool(object):
    """
    Registry of sandbox pages. At most one active sandbox per core; released
    pages are kept and zeroed before reuse.
    """

    def __init__(self, space, sandbox_tag, max_sandboxes=None):
        self.space = space
        self.sandbox_tag = sandbox_tag
        self.max_sandboxes = max_sandboxes
        self._lock = threading.Lock()
        self._active = {}
        self._free = []
        self._all = []

    def __len__(self):
        return len(self._all)

    def pages(self):
        return [sb.page_base for sb in self._all]

    def active(self, core_id):
        return self._active.get(core_id)

    def _new_page(self, core_id):
        if self.max_sandboxes is not None and len(self._all) >= self.max_sandboxes:
            raise SandboxPoolExhausted("sandbox pool limit of %i reached" % self.max_sandboxes)
        page = self.space.reserve(PAGE_SIZE, align=PAGE_SIZE, name="sandbox-%i" % len(self._all))
        sb = Sandbox(self.space, core_id, page)
        self._all.append(sb)
        return sb

    def preallocate(self, core_id):
        """Create the page a core will run on, so its masks are known before loading."""
        with self._lock:
            sb = self._new_page(core_id)
            self._free.append(sb)
        return sb

    def page_for(self, core_id):
        """The sandbox `acquire(core_id)` will hand out next."""
        with self._lock:
            active = self._active.get(core_id)
            if active is not None:
                return active
            for sb in reversed(self._free):
                if sb.last_core == core_id:
                    return sb
            if self._free:
                return self._free[-1]
        return self.preallocate(core_id)

    def clone(self, space):
        other = SandboxPool(space, self.sandbox_tag, self.max_sandboxes)
        for sb in self._all:
            copy = Sandbox(space, sb.last_core, sb.page_base)
            other._all.append(copy)
            other._free.append(copy)
        return other

    def _take_free(self, core_id):
        # prefer the page this core released last
        for i in range(len(self._free) - 1, -1, -1):
            if self._free[i].last_core == core_id:
                return self._free.pop(i)
        if self._free:
            return self._free.pop()
        return None

    def acquire(self, core_id, mode):
        with self._lock:
            if core_id in self._active:
                raise CoreBusy("core %i already runs a program" % core_id)
            sb = self._take_free(core_id)
            reused = sb is not None
            if sb is None:
                sb = self._new_page(core_id)
            sb.core_id = core_id
            sb.state = "active"
            self._active[core_id] = sb

        space = self.space
        space.zero(sb.page_base, PAGE_SIZE)
        if mode in TAGGED_MODES:
            sb.tag = self.sandbox_tag
            space.set_tag_range(sb.metadata_base, METADATA_SIZE, space.default_mem_tag)
            space.set_tag_range(sb.guest_base, GUEST_SIZE, self.sandbox_tag)
        else:
            sb.tag = None
            space.set_tag_range(sb.page_base, PAGE_SIZE, space.default_mem_tag)
        sb.entered = False
        sb.context_end = 0
        sb.sync_table = None
        sb._meta_write(META_AND_MASK, sb.mask.and_mask)
        sb._meta_write(META_OR_MASK, sb.mask.or_mask)
        logger.debug("%s sandbox page 0x%x for core %i (%s)"
                     % ("reused" if reused else "new", sb.page_base, core_id, mode))
        return sb

    def release(self, sb):
        with self._lock:
            if self._active.get(sb.core_id) is not sb:
                raise SandboxError("sandbox on core %i is not active" % sb.core_id)
            del self._active[sb.core_id]
            sb.state = "free"
            sb.entered = False
            sb.sync_table = None
            sb.last_core = sb.core_id
            self._free.append(sb)
