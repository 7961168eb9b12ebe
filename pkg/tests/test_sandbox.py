# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import numpy as np
import pytest

from bpfbox.errors import TagMismatch
from bpfbox.instrument import mask_address
from bpfbox.maps import METADATA_SIZE as MAP_METADATA_SIZE
from bpfbox.memory import GUEST, SimAddressSpace
from bpfbox.sandbox import (
    GUEST_SIZE,
    METADATA_SIZE,
    PAGE_SIZE,
    STACK_SIZE,
    CoreBusy,
    DoubleEnter,
    ExitWithoutEnter,
    InvalidMaskPair,
    MaskPair,
    OutOfSandboxMemory,
    SandboxPool,
    ZeroAlloc,
)
from bpfbox.utils import U64


@pytest.fixture
def space():
    space = SimAddressSpace(1 << 16)
    space.fill_random(np.random.RandomState(1))
    return space


@pytest.fixture
def pool(space):
    return SandboxPool(space, sandbox_tag=4)


def test_layout_constants():
    assert METADATA_SIZE + GUEST_SIZE == PAGE_SIZE
    assert STACK_SIZE == 512


def test_acquire_fresh_page_is_zeroed(pool, space):
    sb = pool.acquire(0, "sfi")
    assert sb.guest_base % GUEST_SIZE == 0
    assert space.read_bytes(sb.guest_base, GUEST_SIZE) == bytes(GUEST_SIZE)
    assert sb.mask == MaskPair(GUEST_SIZE - 1, sb.guest_base)


def test_reuse_zeroes_guest_bytes(pool, space):
    sb = pool.acquire(0, "sfi")
    space.write(sb.guest_base + 100, 8, 0xFFFF)
    pool.release(sb)
    again = pool.acquire(0, "sfi")
    assert again is sb
    assert space.read_bytes(sb.guest_base, GUEST_SIZE) == bytes(GUEST_SIZE)


def test_core_busy(pool):
    pool.acquire(0, "sfi")
    with pytest.raises(CoreBusy):
        pool.acquire(0, "sfi")
    pool.acquire(1, "sfi")


def test_tag_separation(pool, space):
    sb = pool.acquire(0, "mte")
    assert set(space.get_tags(sb.guest_base, GUEST_SIZE)) == {4}
    assert set(space.get_tags(sb.metadata_base, METADATA_SIZE)) == {0xE}
    assert (sb.tagged(sb.guest_base) >> 56) == 4


def test_heap_alloc(pool):
    sb = pool.acquire(0, "sfi")
    sb.set_context_end(64)
    assert sb.heap_alloc(40) == sb.guest_base + 64
    assert sb.heap_bump == 104
    with pytest.raises(ZeroAlloc):
        sb.heap_alloc(0)


def test_heap_cannot_cross_stack(pool):
    sb = pool.acquire(0, "sfi")
    sb.set_context_end(64)
    with pytest.raises(OutOfSandboxMemory):
        sb.heap_alloc(GUEST_SIZE - 64 - STACK_SIZE + 1)


def test_enter_exit(pool, space):
    sb = pool.acquire(0, "sfi")
    r10 = sb.enter(0xCAFE)
    assert r10 == sb.guest_base + GUEST_SIZE
    with pytest.raises(DoubleEnter):
        sb.enter(0xBEEF)
    # the guest writes anywhere in its partition; the saved copy lives in metadata
    space.write_bytes(sb.guest_base, b"\xff" * GUEST_SIZE)
    assert sb.exit() == 0xCAFE
    with pytest.raises(ExitWithoutEnter):
        sb.exit()


def random_u64(rng, n):
    hi = rng.randint(0, 1 << 32, size=n, dtype=np.uint64)
    lo = rng.randint(0, 1 << 32, size=n, dtype=np.uint64)
    return [(int(h) << 32) | int(l) for h, l in zip(hi, lo)]


def test_masked_addresses_stay_in_partition(pool):
    pair = pool.acquire(0, "sfi").mask
    rng = np.random.RandomState(5)
    for a in random_u64(rng, 10000) + [0, U64, 1 << 63, pair.base - 1, pair.base + pair.size]:
        m = mask_address(a, pair)
        assert m == pair.apply(a)
        assert pair.covers(m)
        assert mask_address(m, pair) == m


def test_in_bounds_addresses_are_fixed_points(pool):
    pair = pool.acquire(0, "sfi").mask
    for a in range(pair.base, pair.base + pair.size):
        assert mask_address(a, pair) == a


@pytest.mark.parametrize("name", ["sockex1", "vfs"])
def test_metadata_is_unreachable(make_world, name):
    world = make_world(name, "sfi")
    pairs = list(world.components(0).values())
    metadata = [(page, METADATA_SIZE) for page in world.pool.pages()]
    metadata += [(d.metadata_addr, MAP_METADATA_SIZE) for d in world.maps]
    rng = np.random.RandomState(9)
    for a in random_u64(rng, 10000):
        for pair in pairs:
            m = mask_address(a, pair)
            assert not any(start <= m < start + size for start, size in metadata)


@pytest.mark.parametrize("mode", ["mte", "mte-min"])
def test_metadata_faults_tagged_guest_access(make_world, mode):
    world = make_world("sockex1", mode)
    sb = world.pool.acquire(0, mode)
    metadata = [(sb.metadata_base, METADATA_SIZE)]
    metadata += [(d.metadata_addr, MAP_METADATA_SIZE) for d in world.maps]
    rng = np.random.RandomState(13)
    for _ in range(10000):
        start, size = metadata[rng.randint(len(metadata))]
        width = int(rng.choice([1, 2, 4, 8]))
        addr = sb.tagged(start + width * int(rng.randint(size // width)))
        with pytest.raises(TagMismatch):
            if rng.rand() < 0.5:
                world.space.read(addr, width, world.policy, GUEST)
            else:
                world.space.write(addr, width, 0, world.policy, GUEST)
    assert sb.saved_stack_register == 0
    assert world.maps.get(1).refcount == 1


def test_reuse_zeroing_randomized(pool, space):
    rng = np.random.RandomState(17)
    held = {}
    for _ in range(10000):
        core = int(rng.randint(3))
        if core in held:
            sb = held.pop(core)
            off = int(rng.randint(GUEST_SIZE - 8))
            space.write(sb.guest_base + off, 8, int(rng.randint(1, 1 << 62, dtype=np.int64)))
            sb.set_context_end(int(rng.randint(1, 1024)))
            pool.release(sb)
            continue
        mode = ("sfi", "mte")[rng.randint(2)]
        sb = pool.acquire(core, mode)
        held[core] = sb
        assert space.read_bytes(sb.guest_base, GUEST_SIZE) == bytes(GUEST_SIZE)
        assert sb.heap_bump == 0
        assert sb.saved_stack_register == 0
        assert set(space.get_tags(sb.guest_base, GUEST_SIZE)) == ({4} if mode == "mte" else {0xE})
    assert len(pool) <= 3


def test_stack_register_survives_guest_tampering(pool, space):
    sb = pool.acquire(0, "sfi")
    rng = np.random.RandomState(19)
    for frame in random_u64(rng, 10000):
        r10 = sb.enter(frame)
        for a in random_u64(rng, 4):
            # the guest can only store through masked addresses
            addr = mask_address(a, sb.mask) & ~7
            space.write(addr, 8, a)
        assert r10 == sb.stack_top
        assert sb.exit() == frame


def test_invalid_mask_pairs():
    with pytest.raises(InvalidMaskPair):
        MaskPair(0x7FF, 0x801)
    with pytest.raises(InvalidMaskPair):
        MaskPair(0x7FE, 0x800)
