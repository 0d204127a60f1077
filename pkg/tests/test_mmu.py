"""Opaque-window translation, guest walks, and non-interference."""

import random

import pytest

import refwalker
from drivergen import build_driver
from transplantkit.driver import rebase
from transplantkit.errors import (
    GuestFault,
    ImageTooLarge,
    OutOfOpaqueRange,
    UnmappedAddress,
)
from transplantkit.mmu import (
    Access,
    AddressSpace,
    SparseMemory,
    Source,
    coarse_table_descriptor,
    section_descriptor,
    small_page_descriptor,
)

TTBR = 0x4000


def make_space(opaque_base=0xD0000000, opaque_len=0x10000) -> AddressSpace:
    phys = SparseMemory()
    phys.map_region(0, 0x100000)  # low RAM holding tables and data
    return AddressSpace(
        phys=phys, ttbr=TTBR, opaque_base=opaque_base, opaque_len=opaque_len
    )


def map_section(space, vaddr, paddr, writable=True, executable=True):
    slot = TTBR + ((vaddr >> 20) << 2)
    space.phys.write_word(slot, section_descriptor(paddr, writable, executable))


def map_page(space, vaddr, paddr, l2_base, writable=True, executable=True):
    space.phys.write_word(
        TTBR + ((vaddr >> 20) << 2), coarse_table_descriptor(l2_base)
    )
    space.phys.write_word(
        l2_base + (((vaddr >> 12) & 0xFF) << 2),
        small_page_descriptor(paddr, writable, executable),
    )


def test_opaque_range_uses_hijack_source():
    space = make_space()
    tr = space.translate(0xD0000100, Access.READ)
    assert tr.source is Source.HIJACK
    assert tr.paddr == 0x100
    assert tr.perms.read and tr.perms.write and tr.perms.execute


def test_section_walk_matches_hand_computation():
    space = make_space()
    map_section(space, 0xC0000000, 0x00000000)
    tr = space.translate(0xC0008000, Access.READ)
    assert tr.source is Source.GUEST
    assert tr.paddr == 0x00008000


def test_invalid_l1_descriptor_faults_level_1():
    space = make_space()
    with pytest.raises(GuestFault) as excinfo:
        space.translate(0xC0008000, Access.READ)
    assert excinfo.value.level == 1


def test_small_page_walk_and_level2_fault():
    space = make_space()
    map_page(space, 0x00300000, 0x00042000, l2_base=0x8000)
    tr = space.translate(0x00300ABC, Access.READ)
    assert tr.paddr == 0x00042ABC
    with pytest.raises(GuestFault) as excinfo:
        space.translate(0x00301000, Access.READ)  # empty L2 slot
    assert excinfo.value.level == 2


def test_permission_bits_reduce_to_flags():
    space = make_space()
    map_section(space, 0xC0000000, 0, writable=False, executable=False)
    tr = space.translate(0xC0000000, Access.READ)
    assert tr.perms.read and not tr.perms.write and not tr.perms.execute
    with pytest.raises(GuestFault) as excinfo:
        space.translate(0xC0000000, Access.WRITE)
    assert excinfo.value.reason == "perm"


def test_opaque_boundaries_partition_sources():
    space = make_space()
    map_section(space, 0xD0000000 + 0x100000, 0)  # section after the window
    last_inside = space.opaque_base + space.opaque_len - 1
    assert space.translate(space.opaque_base, Access.READ).source is Source.HIJACK
    assert space.in_opaque(last_inside)
    with pytest.raises(GuestFault):
        # one past the window walks the guest tables (and faults: unmapped)
        space.translate(space.opaque_base + space.opaque_len, Access.READ)


def test_map_opaque_bounds():
    space = make_space()
    space.map_opaque(0, 0)  # zero-length no-op
    space.map_opaque(0, space.opaque_len)  # full window
    with pytest.raises(OutOfOpaqueRange):
        space.map_opaque(space.opaque_len - 4, 8)


def test_load_driver_roundtrip_and_phys_untouched():
    space = make_space()
    map_section(space, 0xC0000000, 0)
    before = space.phys.content_hash()
    drv, _, _ = build_driver(bss_size=0x7000)
    patched = rebase(drv, 0xD0000000)
    assert len(patched.image) >= 0x7000
    space.load_driver(patched)
    assert space.phys.content_hash() == before
    assert space.fetch_exec(0xD0000000, len(patched.image)) == patched.image


def test_load_driver_too_large():
    space = make_space(opaque_len=0x1000)
    drv, _, _ = build_driver(bss_size=0x1000)
    patched = rebase(drv, 0xD0000000)
    with pytest.raises(ImageTooLarge):
        space.load_driver(patched)


def test_load_driver_outside_window():
    space = make_space()
    drv, _, _ = build_driver()
    patched = rebase(drv, 0xC0000000)
    with pytest.raises(ImageTooLarge):
        space.load_driver(patched)


def test_sparse_memory_unmapped_write_raises():
    mem = SparseMemory()
    with pytest.raises(UnmappedAddress):
        mem.write(0x5000_0000, b"x")
    assert mem.read_word(0x5000_0000) is None


def _random_tables(rng, space):
    """Populate guest tables with a mix of sections, pages, and holes."""
    mapped = []
    l2_next = 0x8000
    for _ in range(24):
        vaddr = rng.randrange(0, 0x1000) << 20
        if space.in_opaque(vaddr):
            continue
        kind = rng.random()
        if kind < 0.5:
            paddr = rng.randrange(0, 0x1000) << 20
            map_section(
                space, vaddr, paddr,
                writable=rng.random() < 0.7, executable=rng.random() < 0.7,
            )
            mapped.append(vaddr)
        else:
            l2 = l2_next
            l2_next += 0x400
            for _ in range(rng.randrange(1, 6)):
                page_v = vaddr + (rng.randrange(256) << 12)
                map_page(
                    space, page_v, rng.randrange(0, 0x100000) << 12, l2,
                    writable=rng.random() < 0.7, executable=rng.random() < 0.7,
                )
                mapped.append(page_v)
    return mapped


def test_guest_walk_agrees_with_reference_walker():
    rng = random.Random(0x1A2B)
    space = make_space()
    mapped = _random_tables(rng, space)
    probes = [rng.randrange(1 << 32) for _ in range(10_000)]
    probes += [v + rng.randrange(0x100000) for v in mapped for _ in range(2)]
    probes += [space.opaque_base - 1, space.opaque_base + space.opaque_len]
    for vaddr in probes:
        vaddr &= 0xFFFFFFFF
        if space.in_opaque(vaddr):
            continue
        try:
            expected = refwalker.walk(space.phys.read_word, TTBR, vaddr)
        except refwalker.RefFault as fault:
            with pytest.raises(GuestFault) as excinfo:
                space.translate(vaddr, Access.READ)
            assert excinfo.value.level == fault.level
            continue
        paddr, writable, executable = expected
        tr = space.translate(vaddr, Access.READ)
        assert tr.paddr == paddr
        assert tr.perms.write == writable
        assert tr.perms.execute == executable


def test_opaque_partition_randomized():
    rng = random.Random(77)
    space = make_space()
    map_section(space, 0xC0000000, 0)
    probes = [rng.randrange(1 << 32) for _ in range(10_000)]
    probes += [
        space.opaque_base,
        space.opaque_base + space.opaque_len - 1,
        space.opaque_base + space.opaque_len,
        space.opaque_base - 1,
    ]
    for vaddr in probes:
        inside = space.opaque_base <= vaddr < space.opaque_base + space.opaque_len
        if inside:
            assert space.translate(vaddr, Access.READ).source is Source.HIJACK
        else:
            try:
                tr = space.translate(vaddr, Access.READ)
            except GuestFault:
                continue
            assert tr.source is Source.GUEST


def test_opaque_writes_never_touch_guest_state():
    rng = random.Random(5150)
    space = make_space()
    map_section(space, 0xC0000000, 0)
    space.phys.write(0x00008000, b"guest kernel bytes")
    baseline_hash = space.phys.content_hash()
    baseline_translations = [
        (v, space.translate(v, Access.READ).paddr)
        for v in (0xC0000000, 0xC0008000, 0xC00FF000)
    ]
    for _ in range(1000):
        offset = rng.randrange(space.opaque_len - 4)
        space.write(space.opaque_base + offset, rng.randbytes(4))
    assert space.phys.content_hash() == baseline_hash
    for vaddr, paddr in baseline_translations:
        assert space.translate(vaddr, Access.READ).paddr == paddr
