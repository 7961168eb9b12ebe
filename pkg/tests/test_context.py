# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import pytest

from bpfbox import isa
from bpfbox.analyze import check_and_analyze
from bpfbox.context import (
    ROOT,
    ContextSpec,
    KernelObjectDescriptor,
    KernelObjects,
    TagPool,
    TaggingConflict,
    UnresolvedPath,
    mte_min_restore,
    mte_min_tag_object,
    prepare_context,
    refresh_after_helper,
    sync_out,
    translate_for_helper,
)
from bpfbox.errors import UnknownObject
from bpfbox.memory import SimAddressSpace

FLOW_DST = 167772162


def analyzed(world, text):
    return check_and_analyze(isa.assemble(text), world.analysis_env()).access_set


def prepared(world, text, copy_mode="partial"):
    access_set = analyzed(world, text)
    sb = world.pool.acquire(0, world.mode)
    ctx, table = prepare_context(sb, world.objects, world.root, world.spec, access_set, copy_mode)
    return sb, ctx, table


def test_partial_copies_only_accessed_fields(make_world):
    world = make_world("sockex2", "sfi")
    sb, ctx, table = prepared(world, "ldxw r2, [r1+0]\nldxw r3, [r1+4]\nmov64 r0, 0\nexit")
    assert len(table) == 2
    assert table.populated_bytes() == 8
    assert table.bytes_moved == 8
    assert table.allocations == 0
    assert sb.context_end == 8
    assert world.space.read(ctx, 4) == 98
    assert world.space.read(ctx + 4, 4) == 2048


def test_nested_object_goes_to_heap(make_world):
    world = make_world("sockex2", "sfi")
    sb, ctx, table = prepared(world, "ldxdw r2, [r1+32]\nldxw r3, [r2+4]\nmov64 r0, 0\nexit")
    assert table.allocations == 1
    child = world.space.read(ctx + 32, 8)
    assert child == sb.guest_base + sb.context_end
    assert world.space.read(child + 4, 4) == FLOW_DST
    flow = world.objects.get("flow0")
    assert table.lookup(child).kernel_object is flow


def test_full_copy_covers_every_field(make_world):
    world = make_world("sockex2", "sfi")
    _, _, partial = prepared(world, "ldxw r2, [r1+0]\nmov64 r0, 0\nexit")
    world = make_world("sockex2", "sfi")
    _, _, full = prepared(world, "ldxw r2, [r1+0]\nmov64 r0, 0\nexit", copy_mode="full")
    assert len(full) == len(world.spec)
    assert full.copied_in > partial.copied_in
    assert full.bytes_moved > partial.bytes_moved


def test_empty_access_set(make_world):
    world = make_world("sockex2", "sfi")
    sb, _, table = prepared(world, "mov64 r0, 0\nexit")
    assert len(table) == 0
    assert sb.context_end == 0


def test_mte_context_is_tagged(make_world):
    world = make_world("sockex2", "mte")
    sb, ctx, _ = prepared(world, "ldxw r2, [r1+0]\nmov64 r0, 0\nexit")
    assert ctx >> 56 == 4
    assert world.space.get_tag(ctx) == 4


def test_sync_out_writes_back_writable_fields(make_world):
    world = make_world("sockex2", "sfi")
    sb, ctx, table = prepared(world, "stw [r1+8], 0\nmov64 r0, 0\nexit")
    world.space.write(ctx + 8, 4, 9000)
    table.mark_dirty(ctx + 8, 4)
    assert sync_out(sb, table) == 1
    assert world.objects.read_field(world.root, "mark") == 9000


def test_sync_out_skips_read_only_fields(make_world):
    world = make_world("sockex2", "sfi")
    sb, ctx, table = prepared(world, "ldxw r2, [r1+0]\nmov64 r0, 0\nexit")
    world.space.write(ctx, 4, 1)
    table.mark_dirty(ctx, 4)
    assert sync_out(sb, table) == 0
    assert table.report()["skipped"] == 1
    assert world.objects.read_field(world.root, "len") == 98


def test_sync_out_without_stores(make_world):
    world = make_world("sockex2", "sfi")
    sb, _, table = prepared(world, "ldxw r2, [r1+8]\nmov64 r0, 0\nexit")
    assert sync_out(sb, table) == 0


def test_translate_and_refresh(make_world):
    world = make_world("sockex2", "sfi")
    sb, ctx, table = prepared(world, "ldxw r2, [r1+8]\nmov64 r0, 0\nexit")
    assert translate_for_helper(table, ctx) == world.root.addr
    with pytest.raises(UnknownObject):
        translate_for_helper(table, ctx + 16)
    world.objects.set_field(world.root, "mark", 77)
    assert refresh_after_helper(table, ctx) == 1
    assert table.bytes_moved == 4 + 4
    assert world.space.read(ctx + 8, 4) == 77


def test_translate_flushes_dirty_fields(make_world):
    world = make_world("sockex2", "sfi")
    sb, ctx, table = prepared(world, "stw [r1+12], 0\nmov64 r0, 0\nexit")
    world.space.write(ctx + 12, 4, 5)
    table.mark_dirty(ctx + 12, 4)
    translate_for_helper(table, ctx)
    assert table.flushed == 1
    assert table.report()["bytes_moved"] == 4 + 4
    assert world.objects.read_field(world.root, "priority") == 5


def test_mte_min_tags_granules(make_world):
    world = make_world("sockex2", "mte-min")
    access_set = analyzed(world, "ldxw r2, [r1+0]\nmov64 r0, 0\nexit")
    receipt = mte_min_tag_object(world.space, world.objects, world.root, world.spec, access_set,
                                 world.tag_pool)
    assert receipt.granules_tagged == 1
    assert receipt.overtagged_bytes == 12
    assert receipt.tag not in (4, 0xE)
    assert world.space.get_tag(world.root.addr) == receipt.tag
    with pytest.raises(TaggingConflict):
        mte_min_tag_object(world.space, world.objects, world.root, world.spec, access_set,
                           world.tag_pool)
    assert mte_min_restore(world.space, receipt, world.tag_pool) == 1
    assert world.space.get_tag(world.root.addr) == 0xE


def test_mte_min_fields_sharing_a_granule(make_world):
    world = make_world("sockex2", "mte-min")
    access_set = analyzed(world, "ldxw r2, [r1+0]\nldxw r3, [r1+4]\nmov64 r0, 0\nexit")
    receipt = mte_min_tag_object(world.space, world.objects, world.root, world.spec, access_set,
                                 world.tag_pool)
    assert receipt.granules_tagged == 1
    assert receipt.overtagged_bytes == 8


def test_tag_pool_exhaustion_weakens():
    pool = TagPool()
    receipts = [pool.acquire() for _ in range(17)]
    assert len(pool.tags) == 14
    assert not any(weak for _, weak in receipts[:14])
    assert all(weak for _, weak in receipts[14:])


def test_spec_validation():
    space = SimAddressSpace(1 << 14)
    objects = KernelObjects(space)
    objects.add_descriptor(KernelObjectDescriptor("obj", 8, [{"name": "a", "offset": 0, "size": 4}]))
    good = ContextSpec.from_dict({"name": "c", "root": "obj", "fields": [
        {"name": "a", "ctx_offset": 0, "size": 4, "path": "a"}]})
    good.validate(objects)
    assert good.level(ROOT)[0].readable
    bad = ContextSpec.from_dict({"name": "c", "root": "obj", "fields": [
        {"name": "a", "ctx_offset": 0, "size": 8, "path": "a"}]})
    with pytest.raises(UnresolvedPath):
        bad.validate(objects)
    missing = ContextSpec.from_dict({"name": "c", "root": "obj", "fields": [
        {"name": "b", "ctx_offset": 0, "size": 4, "path": "b"}]})
    with pytest.raises(UnresolvedPath):
        missing.validate(objects)


def test_object_levels(make_world):
    world = make_world("sockex2", "vanilla")
    flow = world.objects.get("flow0")
    assert world.levels[world.root.addr] == (world.root, ROOT)
    assert world.levels[flow.addr] == (flow, "flow")
