# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""
Kernel objects and the context a program sees of them.

A ContextSpec describes the guest-visible layout: each mirrored field has a
ctx offset and a dotted kernel path (``dev.ifindex`` follows the ``dev``
reference of the root object). Reference fields carry their own nested
layout, a "level" keyed by the dotted chain of reference names; the root
layout is level "".

Sandboxed modes copy the accessed fields into the sandbox and keep a
SyncTable to write dirty fields back. mte-min instead tags the accessed
kernel bytes in place.
"""

import threading
from dataclasses import dataclass, field
from logging import getLogger
from typing import Dict, List, Optional

from bpfbox.errors import BpfBoxError, UnknownObject
from bpfbox.memory import GRANULE, untagged
from bpfbox.utils import align_up

logger = getLogger()

SCALAR = "scalar"
REFERENCE = "reference"
POINTER_SIZE = 8
ACCESS_MODES = ("read", "write", "rw")
ROOT = ""

MTE_MIN_TAGS = tuple(range(1, 15))


class ContextError(BpfBoxError):
    pass


class DescriptorError(ContextError):
    pass


class UnresolvedPath(ContextError):
    pass


class TaggingConflict(ContextError):
    pass


class TagPoolExhausted(ContextError):
    pass


def _check_layout(owner, fields, size=None, offset_attr="offset"):
    end = 0
    for f in sorted(fields, key=lambda f: getattr(f, offset_attr)):
        start = getattr(f, offset_attr)
        if f.size <= 0 or start < 0:
            raise DescriptorError("%s.%s has an empty or negative range" % (owner, f.name))
        if start < end:
            raise DescriptorError("%s.%s overlaps the previous field" % (owner, f.name))
        end = start + f.size
        if f.kind == REFERENCE and f.size != POINTER_SIZE:
            raise DescriptorError("%s.%s: references are %i bytes" % (owner, f.name, POINTER_SIZE))
        if f.kind not in (SCALAR, REFERENCE):
            raise DescriptorError("%s.%s: unknown kind %r" % (owner, f.name, f.kind))
    if size is not None and end > size:
        raise DescriptorError("%s: fields end at %i, past the object size %i" % (owner, end, size))


# ============ kernel objects ... ============

@dataclass
class FieldDescriptor:
    name: str
    offset: int
    size: int
    kind: str = SCALAR
    target: Optional[str] = None


@dataclass
class KernelObjectDescriptor:
    name: str
    size: int
    fields: List[FieldDescriptor]

    def __post_init__(self):
        self.fields = [f if isinstance(f, FieldDescriptor) else FieldDescriptor(**f)
                       for f in self.fields]
        _check_layout(self.name, self.fields, self.size)
        for f in self.fields:
            if f.kind == REFERENCE and not f.target:
                raise DescriptorError("%s.%s: reference without a target type" % (self.name, f.name))

    def field(self, name):
        for f in self.fields:
            if f.name == name:
                return f
        raise UnresolvedPath("%s has no field %r" % (self.name, name))


@dataclass
class KernelObject:
    name: str
    descriptor: KernelObjectDescriptor
    addr: int

    @property
    def size(self):
        return self.descriptor.size


class KernelObjects(object):
    """Descriptors and the object instances living in the kernel arena."""

    def __init__(self, space):
        self.space = space
        self.descriptors = {}
        self._objects = {}
        self._by_addr = {}

    def __iter__(self):
        return iter(self._objects.values())

    def add_descriptor(self, desc):
        if desc.name in self.descriptors:
            raise DescriptorError("descriptor %s declared twice" % desc.name)
        self.descriptors[desc.name] = desc

    def descriptor(self, name):
        try:
            return self.descriptors[name]
        except KeyError:
            raise UnresolvedPath("unknown object type %r" % name)

    def allocate(self, name, type_name):
        if name in self._objects:
            raise DescriptorError("object %s declared twice" % name)
        desc = self.descriptor(type_name)
        addr = self.space.reserve(align_up(desc.size, GRANULE), align=GRANULE, name=name)
        self.space.zero(addr, align_up(desc.size, GRANULE))
        obj = KernelObject(name, desc, addr)
        self._objects[name] = obj
        self._by_addr[addr] = obj
        return obj

    def get(self, name):
        try:
            return self._objects[name]
        except KeyError:
            raise UnresolvedPath("unknown kernel object %r" % name)

    def by_addr(self, addr):
        return self._by_addr.get(untagged(addr))

    def set_field(self, obj, name, value):
        f = obj.descriptor.field(name)
        if f.kind == REFERENCE:
            if not isinstance(value, KernelObject):
                value = self.get(value)
            if value.descriptor.name != f.target:
                raise DescriptorError("%s.%s expects a %s, got %s"
                                      % (obj.name, name, f.target, value.descriptor.name))
            value = value.addr
        self.space.write(obj.addr + f.offset, f.size, value)

    def read_field(self, obj, name):
        f = obj.descriptor.field(name)
        return self.space.read(obj.addr + f.offset, f.size)

    def resolve(self, obj, path):
        """Kernel address and descriptor of the field a dotted path names."""
        parts = path.split(".")
        for part in parts[:-1]:
            f = obj.descriptor.field(part)
            if f.kind != REFERENCE:
                raise UnresolvedPath("%s.%s is not a reference" % (obj.descriptor.name, part))
            ptr = self.space.read(obj.addr + f.offset, POINTER_SIZE)
            nxt = self.by_addr(ptr)
            if nxt is None:
                raise UnresolvedPath("%s.%s points at no known object" % (obj.name, part))
            obj = nxt
        f = obj.descriptor.field(parts[-1])
        return obj.addr + f.offset, f

    def target(self, obj, path):
        addr, f = self.resolve(obj, path)
        if f.kind != REFERENCE:
            raise UnresolvedPath("%s is not a reference" % path)
        nxt = self.by_addr(self.space.read(addr, POINTER_SIZE))
        if nxt is None:
            raise UnresolvedPath("%s of %s points at no known object" % (path, obj.name))
        return nxt

    def ranges(self):
        return [(o.addr, o.size) for o in self]

    def clone(self, space):
        other = KernelObjects(space)
        other.descriptors = dict(self.descriptors)
        other._objects = dict(self._objects)
        other._by_addr = dict(self._by_addr)
        return other


# ============ context layout ... ============

@dataclass
class ContextField:
    name: str
    ctx_offset: int
    size: int
    path: str
    access: str = "read"
    kind: str = SCALAR
    fields: List["ContextField"] = field(default_factory=list)
    level: str = ROOT
    child: Optional[str] = None

    @property
    def end(self):
        return self.ctx_offset + self.size

    @property
    def readable(self):
        return self.access in ("read", "rw")

    @property
    def writable(self):
        return self.access in ("write", "rw")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["fields"] = [cls.from_dict(f) for f in d.get("fields", [])]
        return cls(**d)


class ContextSpec(object):
    def __init__(self, name, root, fields):
        self.name = name
        self.root = root
        self.fields = list(fields)
        self.levels = {}
        self._index(ROOT, self.fields)

    def _index(self, level, fields):
        _check_layout("%s[%s]" % (self.name, level), fields, offset_attr="ctx_offset")
        self.levels[level] = sorted(fields, key=lambda f: f.ctx_offset)
        for f in fields:
            if f.access not in ACCESS_MODES:
                raise DescriptorError("%s: unknown access mode %r" % (f.name, f.access))
            f.level = level
            if f.kind == REFERENCE:
                if f.writable:
                    raise DescriptorError("%s: reference fields are read-only" % f.name)
                f.child = f.name if level == ROOT else "%s.%s" % (level, f.name)
                self._index(f.child, f.fields)

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["root"], [ContextField.from_dict(f) for f in d["fields"]])

    def __len__(self):
        return sum(len(fields) for fields in self.levels.values())

    def level(self, key):
        try:
            return self.levels[key]
        except KeyError:
            raise UnresolvedPath("context %s has no nested level %r" % (self.name, key))

    @staticmethod
    def size_of(fields):
        return align_up(max((f.end for f in fields), default=0), 8)

    def level_size(self, key):
        return self.size_of(self.level(key))

    def field_at(self, level, start, length):
        """The field wholly containing [start, start+length), if any."""
        for f in self.levels.get(level, ()):
            if f.ctx_offset <= start and start + length <= f.end:
                return f
        return None

    def field_named(self, level, name):
        for f in self.level(level):
            if f.name == name:
                return f
        raise UnresolvedPath("context %s has no field %s" % (self.name, name))

    def validate(self, objects):
        """Every path resolves through the declared descriptors with a matching size."""
        self._validate(objects, objects.descriptor(self.root), self.fields)

    def _validate(self, objects, desc, fields):
        for f in fields:
            d = desc
            parts = f.path.split(".")
            for part in parts[:-1]:
                ref = d.field(part)
                if ref.kind != REFERENCE:
                    raise UnresolvedPath("%s: %s.%s is not a reference" % (f.path, d.name, part))
                d = objects.descriptor(ref.target)
            kf = d.field(parts[-1])
            if kf.kind != f.kind:
                raise UnresolvedPath("%s: kind %s does not match %s" % (f.path, f.kind, kf.kind))
            if kf.size != f.size:
                raise UnresolvedPath("%s: %i bytes mirrored from a %i-byte field"
                                     % (f.path, f.size, kf.size))
            if f.kind == REFERENCE:
                self._validate(objects, objects.descriptor(kf.target), f.fields)


def object_levels(objects, root, spec):
    """Map each kernel object reachable through the context to its level."""
    levels = {root.addr: (root, ROOT)}

    def walk(obj, level):
        for f in spec.level(level):
            if f.kind == REFERENCE:
                target = objects.target(obj, f.path)
                levels[target.addr] = (target, f.child)
                walk(target, f.child)

    walk(root, ROOT)
    return levels


def selected_fields(spec, level, access_set, copy_mode):
    """Fields of a level that must be present for the program."""
    fields = spec.level(level)
    if copy_mode == "full" or access_set is None or level in access_set.variable:
        return list(fields)
    touched = access_set.ranges(level)
    chosen = []
    for f in fields:
        hit = any(s < f.end and f.ctx_offset < e for s, e in touched)
        if f.kind == REFERENCE and not hit:
            hit = any(k == f.child or k.startswith(f.child + ".") for k in access_set.levels())
        if hit:
            chosen.append(f)
    return chosen


# ============ synchronisation ... ============

@dataclass
class SyncEntry:
    field: ContextField
    level: str
    sandbox_addr: int
    kernel_addr: int
    size: int
    dirty: bool = False
    snapshot: bytes = b""

    @property
    def access(self):
        return self.field.access

    @property
    def writable(self):
        return self.field.kind == SCALAR and self.field.writable

    def overlaps(self, addr, length):
        return addr < self.sandbox_addr + self.size and self.sandbox_addr < addr + length


@dataclass
class Translation:
    sandbox_addr: int
    kernel_object: KernelObject
    level: str


class SyncTable(object):
    def __init__(self, space):
        self.space = space
        self.entries = []
        self.translations = {}
        self.copied_in = 0
        self.allocations = 0
        self.written_back = 0
        self.skipped = 0
        self.flushed = 0
        self.refreshed = 0
        self.translated = 0
        # bytes copied in, written back, flushed or refreshed
        self.bytes_moved = 0

    def __len__(self):
        return len(self.entries)

    def add(self, entry):
        for other in self.entries:
            if other.overlaps(entry.sandbox_addr, entry.size):
                raise ContextError("sync entries for %s and %s overlap"
                                   % (other.field.name, entry.field.name))
        self.entries.append(entry)

    def register(self, sandbox_addr, obj, level):
        self.translations[untagged(sandbox_addr)] = Translation(untagged(sandbox_addr), obj, level)

    def lookup(self, sandbox_addr):
        return self.translations.get(untagged(sandbox_addr))

    def entries_for(self, level):
        return [e for e in self.entries if e.level == level]

    def mark_dirty(self, addr, length):
        addr = untagged(addr)
        hits = 0
        for e in self.entries:
            if e.overlaps(addr, length):
                e.dirty = True
                hits += 1
        return hits

    def populated_bytes(self):
        return sum(e.size for e in self.entries)

    def report(self):
        return {
            "fields": len(self.entries),
            "copied_in": self.copied_in,
            "allocations": self.allocations,
            "written_back": self.written_back,
            "skipped": self.skipped,
            "flushed": self.flushed,
            "refreshed": self.refreshed,
            "translated": self.translated,
            "bytes_moved": self.bytes_moved,
        }


def _copy_level(sb, objects, obj, spec, level, fields, base, table, access_set, copy_mode):
    space = sb.space
    for f in fields:
        kaddr, _ = objects.resolve(obj, f.path)
        if f.kind == SCALAR:
            data = space.read_bytes(kaddr, f.size)
            space.write_bytes(base + f.ctx_offset, data)
            table.add(SyncEntry(f, level, base + f.ctx_offset, kaddr, f.size, snapshot=data))
            table.copied_in += 1
            table.bytes_moved += f.size
            continue
        target = objects.target(obj, f.path)
        child_fields = selected_fields(spec, f.child, access_set, copy_mode)
        child_base = sb.heap_alloc(max(spec.size_of(child_fields), POINTER_SIZE))
        table.allocations += 1
        table.register(child_base, target, f.child)
        _copy_level(sb, objects, target, spec, f.child, child_fields, child_base, table,
                    access_set, copy_mode)
        space.write(base + f.ctx_offset, POINTER_SIZE, sb.tagged(child_base))
        table.add(SyncEntry(f, level, base + f.ctx_offset, kaddr, POINTER_SIZE))
        table.copied_in += 1
        table.bytes_moved += POINTER_SIZE


def prepare_context(sb, objects, obj, spec, access_set, copy_mode="partial"):
    """
    Copy the context of `obj` into the sandbox. Nested objects reached
    through reference fields are copied to the sandbox heap and the
    reference is rewritten to point there.
    """
    if copy_mode not in ("partial", "full"):
        raise ContextError("unknown copy mode %r" % copy_mode)
    table = SyncTable(sb.space)
    root_fields = selected_fields(spec, ROOT, access_set, copy_mode)
    sb.set_context_end(spec.size_of(root_fields))
    base = sb.guest_base
    table.register(base, obj, ROOT)
    _copy_level(sb, objects, obj, spec, ROOT, root_fields, base, table, access_set, copy_mode)
    sb.set_sync_table(table)
    logger.debug("prepared %s context of %s: %i fields, %i nested copies"
                 % (copy_mode, obj.name, len(table), table.allocations))
    return sb.tagged(base), table


def _write_back(table, entries):
    written = 0
    for e in entries:
        if not e.dirty:
            continue
        if e.writable:
            table.space.write_bytes(e.kernel_addr, table.space.read_bytes(e.sandbox_addr, e.size))
            e.dirty = False
            written += 1
            table.bytes_moved += e.size
    return written


def sync_out(sb, table):
    written = _write_back(table, table.entries)
    for e in table.entries:
        if e.dirty:
            # read-only field the guest modified
            table.skipped += 1
            e.dirty = False
    table.written_back += written
    return written


def translate_for_helper(table, sandbox_addr):
    """
    Kernel address of the object a helper argument names. Dirty fields of
    that object are flushed first.
    """
    t = table.lookup(sandbox_addr)
    if t is None:
        raise UnknownObject("0x%x is not a sandboxed object" % sandbox_addr, addr=sandbox_addr)
    table.translated += 1
    table.flushed += _write_back(table, table.entries_for(t.level))
    return t.kernel_object.addr


def refresh_after_helper(table, sandbox_addr):
    """Re-copy every mirrored scalar of the object back into the sandbox."""
    t = table.lookup(sandbox_addr)
    count = 0
    for e in table.entries_for(t.level):
        if e.field.kind != SCALAR:
            continue
        data = table.space.read_bytes(e.kernel_addr, e.size)
        table.space.write_bytes(e.sandbox_addr, data)
        e.dirty = False
        e.snapshot = data
        count += 1
        table.bytes_moved += e.size
    table.refreshed += count
    return count


# ============ mte-min ... ============

@dataclass
class TaggingReceipt:
    tag: int
    granules_tagged: int
    overtagged_bytes: int
    saved_tags: Dict[int, int]
    weakened: bool = False

    def as_dict(self):
        return {
            "tag": self.tag,
            "granules_tagged": self.granules_tagged,
            "overtagged_bytes": self.overtagged_bytes,
            "weakened": self.weakened,
        }


class TagPool(object):
    """
    Tags handed to mte-min objects, one per running program. Once every tag
    is in use they are reused round-robin and exclusivity is lost.
    """

    def __init__(self, tags=MTE_MIN_TAGS):
        self.tags = tuple(tags)
        self._in_use = {}
        self._reuse = 0
        self._claimed = {}
        self._lock = threading.Lock()

    def _take(self):
        for tag in self.tags:
            if tag not in self._in_use:
                return tag
        raise TagPoolExhausted("all %i tags are in use" % len(self.tags))

    def acquire(self):
        with self._lock:
            try:
                tag, weakened = self._take(), False
            except TagPoolExhausted:
                tag = self.tags[self._reuse % len(self.tags)]
                self._reuse += 1
                weakened = True
                logger.debug("tag pool exhausted, reusing tag 0x%x" % tag)
            self._in_use[tag] = self._in_use.get(tag, 0) + 1
        return tag, weakened

    def release(self, tag):
        with self._lock:
            self._in_use[tag] -= 1
            if not self._in_use[tag]:
                del self._in_use[tag]

    def claim(self, granules, owner):
        with self._lock:
            clash = [g for g in granules if g in self._claimed]
            if clash:
                raise TaggingConflict("granule 0x%x is already tagged for %s"
                                      % (clash[0], self._claimed[clash[0]]))
            for g in granules:
                self._claimed[g] = owner

    def unclaim(self, granules):
        with self._lock:
            for g in granules:
                self._claimed.pop(g, None)

    def clone(self):
        return TagPool(self.tags)


def tagging_targets(objects, obj, spec, access_set, level=ROOT):
    """Kernel (addr, size) ranges the program reaches through its context."""
    ranges = []
    for f in selected_fields(spec, level, access_set, "partial"):
        kaddr, _ = objects.resolve(obj, f.path)
        ranges.append((kaddr, f.size))
        if f.kind == REFERENCE:
            target = objects.target(obj, f.path)
            ranges.extend(tagging_targets(objects, target, spec, access_set, f.child))
    return ranges


def _union_size(ranges):
    total, end = 0, None
    for start, size in sorted(ranges):
        stop = start + size
        if end is None or start >= end:
            total += size
            end = stop
        elif stop > end:
            total += stop - end
            end = stop
    return total


def mte_min_tag_object(space, objects, obj, spec, access_set, pool):
    """Tag the granules covering the accessed fields with a tag from the pool."""
    ranges = tagging_targets(objects, obj, spec, access_set)
    granules = sorted({g for a, s in ranges
                       for g in range(a // GRANULE * GRANULE, a + s, GRANULE)})
    pool.claim(granules, obj.name)
    tag, weakened = pool.acquire()
    saved = {}
    for g in granules:
        saved[g] = space.get_tag(g)
        space.set_tag_range(g, GRANULE, tag)
    receipt = TaggingReceipt(
        tag=tag,
        granules_tagged=len(granules),
        overtagged_bytes=len(granules) * GRANULE - _union_size(ranges),
        saved_tags=saved,
        weakened=weakened,
    )
    logger.debug("mte-min tagged %i granules of %s with 0x%x" % (len(granules), obj.name, tag))
    return receipt


def mte_min_restore(space, receipt, pool):
    for g, prior in receipt.saved_tags.items():
        space.set_tag_range(g, GRANULE, prior)
    pool.unclaim(list(receipt.saved_tags))
    pool.release(receipt.tag)
    return len(receipt.saved_tags)
