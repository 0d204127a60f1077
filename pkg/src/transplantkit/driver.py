"""Driver blob patching: rebase, import binding, call rewriting, installs.

The driver arrives as a flat container (magic ``ECMODRV1``, layout in
docs/FORMATS.md) produced offline from the compiled driver object.  All code
is linked at base zero; making it runnable at its load address means bumping
every absolute slot, zero-filling the bss, writing resolved kernel addresses
into the import slots, and replacing direct calls whose targets sit outside
the branch-immediate range with pool thunks that preserve exact call
semantics (control reaches the target with the link register holding the
original return address).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

from .errors import (
    DriverFormatError,
    MissingExport,
    ThunkPoolOverflow,
    UnmappedAddress,
    UnresolvedImport,
)

DRIVER_MAGIC = b"ECMODRV1"
DRIVER_VERSION = 1

RELOC_ABS32 = 0
RELOC_CALL24 = 1

REQUIRED_EXPORTS = ("ECMO_init_irq", "ECMO_init_time")

BL_RANGE = 32 * 1024 * 1024  # reach of the 24-bit branch-with-link immediate

# thunk layout: two PC-relative loads, a register branch, two literal slots
_THUNK_LDR_R3 = 0xE59F3004  # ldr r3, [pc, #4]  -> slot at +12
_THUNK_LDR_LR = 0xE59FE004  # ldr lr, [pc, #4]  -> slot at +16
_THUNK_BX_R3 = 0xE12FFF13  # bx r3
THUNK_SIZE = 20


@dataclass(frozen=True)
class DriverObject:
    code: bytes
    relocs: tuple[tuple[int, int], ...]  # (offset, kind)
    imports: tuple[tuple[str, int], ...]  # (pointer name, slot offset)
    exports: dict[str, int]
    bss_offset: int
    bss_size: int

    def __post_init__(self):
        call24 = set()
        for offset, kind in self.relocs:
            if offset + 4 > len(self.code):
                raise DriverFormatError(f"reloc at {offset:#x} overruns code")
            if kind == RELOC_ABS32 and offset % 4:
                raise DriverFormatError(f"abs32 reloc at {offset:#x} misaligned")
            if kind == RELOC_CALL24:
                call24.add(offset)
        for name, slot in self.imports:
            if slot + 4 > len(self.code):
                raise DriverFormatError(f"import slot {name} overruns code")
            if slot in call24:
                raise DriverFormatError(
                    f"import slot {name} collides with a call reloc"
                )
        for name, offset in self.exports.items():
            if not 0 <= offset < len(self.code):
                raise DriverFormatError(f"export {name} outside code")
        if self.bss_offset > len(self.code) + self.bss_size:
            raise DriverFormatError("bss descriptor inconsistent")


@dataclass(frozen=True)
class PatchedDriver:
    image: bytes
    load_addr: int
    entry_map: dict[str, int]
    code_len: int
    bss_offset: int
    bss_size: int

    def word_at(self, offset: int) -> int:
        return struct.unpack_from("<I", self.image, offset)[0]


@dataclass(frozen=True)
class PatchSet:
    patches: tuple[tuple[int, int], ...]  # (absolute address, 32-bit value)

    def __post_init__(self):
        seen = set()
        for addr, _ in self.patches:
            if addr % 4:
                raise ValueError(f"patch address {addr:#x} misaligned")
            if addr in seen:
                raise ValueError(f"duplicate patch address {addr:#x}")
            seen.add(addr)

    def serialize(self) -> str:
        lines = [f"{addr:#010x} {value:#010x}" for addr, value in self.patches]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def parse(cls, text: str) -> "PatchSet":
        patches = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            addr_s, value_s = line.split()
            patches.append((int(addr_s, 16), int(value_s, 16)))
        return cls(patches=tuple(patches))


# --- container serialization -------------------------------------------------

def pack_driver(drv: DriverObject) -> bytes:
    out = bytearray()
    out += DRIVER_MAGIC
    out += struct.pack(
        "<6I",
        DRIVER_VERSION,
        len(drv.code),
        len(drv.relocs),
        len(drv.imports),
        len(drv.exports),
        drv.bss_size,
    )
    out += struct.pack("<I", drv.bss_offset)
    out += drv.code
    for offset, kind in drv.relocs:
        out += struct.pack("<II", offset, kind)
    for name, slot in drv.imports:
        raw = name.encode()
        out += struct.pack("<IH", slot, len(raw)) + raw
    for name, offset in sorted(drv.exports.items()):
        raw = name.encode()
        out += struct.pack("<IH", offset, len(raw)) + raw
    return bytes(out)


def parse_driver(data: bytes) -> DriverObject:
    if data[:8] != DRIVER_MAGIC:
        raise DriverFormatError("bad driver container magic")
    try:
        version, code_len, n_relocs, n_imports, n_exports, bss_size = (
            struct.unpack_from("<6I", data, 8)
        )
        (bss_offset,) = struct.unpack_from("<I", data, 32)
        pos = 36
        code = data[pos : pos + code_len]
        if len(code) != code_len:
            raise DriverFormatError("driver container truncated in code")
        pos += code_len
        relocs = []
        for _ in range(n_relocs):
            offset, kind = struct.unpack_from("<II", data, pos)
            if kind not in (RELOC_ABS32, RELOC_CALL24):
                raise DriverFormatError(f"unknown reloc kind {kind}")
            relocs.append((offset, kind))
            pos += 8
        imports = []
        for _ in range(n_imports):
            slot, namelen = struct.unpack_from("<IH", data, pos)
            pos += 6
            name = data[pos : pos + namelen].decode()
            pos += namelen
            imports.append((name, slot))
        exports = {}
        for _ in range(n_exports):
            offset, namelen = struct.unpack_from("<IH", data, pos)
            pos += 6
            name = data[pos : pos + namelen].decode()
            pos += namelen
            exports[name] = offset
    except struct.error as exc:
        raise DriverFormatError(f"driver container truncated: {exc}") from exc
    if version != DRIVER_VERSION:
        raise DriverFormatError(f"unsupported driver container version {version}")
    missing = [n for n in REQUIRED_EXPORTS if n not in exports]
    if missing:
        raise DriverFormatError(f"driver lacks required exports: {missing}")
    return DriverObject(
        code=code,
        relocs=tuple(relocs),
        imports=tuple(imports),
        exports=exports,
        bss_offset=bss_offset,
        bss_size=bss_size,
    )


# --- patching operations ------------------------------------------------------

def rebase(drv: DriverObject, load_addr: int) -> PatchedDriver:
    """Shift absolute slots by the load address and zero-fill the bss."""
    if load_addr % 4:
        raise ValueError("load address must be 4-aligned")
    image = bytearray(drv.code) + bytes(drv.bss_size)
    for offset, kind in drv.relocs:
        if kind != RELOC_ABS32:
            continue
        value = struct.unpack_from("<I", image, offset)[0]
        struct.pack_into("<I", image, offset, (value + load_addr) & 0xFFFFFFFF)
    entry_map = {name: (off + load_addr) & 0xFFFFFFFF for name, off in drv.exports.items()}
    return PatchedDriver(
        image=bytes(image),
        load_addr=load_addr,
        entry_map=entry_map,
        code_len=len(drv.code),
        bss_offset=drv.bss_offset,
        bss_size=drv.bss_size,
    )


def bind_backward(
    drv: PatchedDriver,
    resolved,
    imports: tuple[tuple[str, int], ...],
) -> PatchedDriver:
    """Write resolved kernel addresses into the import slots.

    ``resolved`` is anything with an ``address_of(name)`` lookup.  All
    missing names are reported in one error.
    """
    missing = [name for name, _ in imports if resolved.address_of(name) is None]
    if missing:
        raise UnresolvedImport(missing)
    image = bytearray(drv.image)
    for name, slot in imports:
        struct.pack_into("<I", image, slot, resolved.address_of(name))
    return replace(drv, image=bytes(image))


def _bl_displacement(site: int, target: int) -> int:
    return target - (site + 8)


def rewrite_out_of_range_calls(
    drv: PatchedDriver,
    targets: dict[int, int],
    pool_limit: int | None = None,
) -> PatchedDriver:
    """Point every direct-call site at its absolute target.

    In-range sites keep their BL with a recomputed displacement.  Out-of-range
    sites become a branch to an appended pool thunk that loads the target and
    the original return address from literal slots, so the callee observes
    exactly what an in-range BL would have produced.  ``pool_limit`` is the
    first address the pool must not reach (the opaque-region end).
    """
    image = bytearray(drv.image)
    pool = bytearray()
    pool_base = drv.load_addr + len(image)

    for offset in sorted(targets):
        target = targets[offset] & 0xFFFFFFFF
        word = struct.unpack_from("<I", image, offset)[0]
        if (word & 0x0F000000) != 0x0B000000:
            raise ValueError(f"call site at {offset:#x} does not hold a BL")
        cond = word & 0xF0000000
        site = drv.load_addr + offset
        disp = _bl_displacement(site, target)
        if -BL_RANGE <= disp < BL_RANGE and disp % 4 == 0:
            struct.pack_into(
                "<I", image, offset, cond | 0x0B000000 | ((disp >> 2) & 0xFFFFFF)
            )
            continue
        thunk_addr = pool_base + len(pool)
        if pool_limit is not None and thunk_addr + THUNK_SIZE > pool_limit:
            raise ThunkPoolOverflow(
                f"thunk pool would reach {thunk_addr + THUNK_SIZE:#x}, "
                f"limit {pool_limit:#x}"
            )
        pool += struct.pack(
            "<5I",
            _THUNK_LDR_R3,
            _THUNK_LDR_LR,
            _THUNK_BX_R3,
            target,
            (site + 4) & 0xFFFFFFFF,
        )
        branch_disp = _bl_displacement(site, thunk_addr)
        struct.pack_into(
            "<I", image, offset, cond | 0x0A000000 | ((branch_disp >> 2) & 0xFFFFFF)
        )

    return replace(drv, image=bytes(image + pool))


_SLOT_EXPORTS = {"init_irq": "ECMO_init_irq", "init_time": "ECMO_init_time"}


def plan_forward_install(
    recipes,
    machine_desc_addr: int,
    entry_map: dict[str, int],
) -> PatchSet:
    """Patches that point the machine-description init slots at the driver."""
    patches = []
    for recipe in recipes:
        export = _SLOT_EXPORTS.get(recipe.name, f"ECMO_{recipe.name}")
        if export not in entry_map:
            raise MissingExport(f"driver does not export {export}")
        patches.append(
            ((machine_desc_addr + recipe.slot_offset) & 0xFFFFFFFF, entry_map[export])
        )
    return PatchSet(patches=tuple(patches))


class FlatStore:
    """Minimal mutable byte store over a contiguous range."""

    def __init__(self, data: bytearray, base: int = 0):
        self.data = data
        self.base = base

    def read_word(self, addr: int) -> int | None:
        off = addr - self.base
        if 0 <= off and off + 4 <= len(self.data):
            return struct.unpack_from("<I", self.data, off)[0]
        return None

    def write_word(self, addr: int, value: int):
        struct.pack_into("<I", self.data, addr - self.base, value & 0xFFFFFFFF)


def apply_patchset(store, ps: PatchSet) -> None:
    """Write every patch word, or nothing at all.

    The store must expose ``read_word``/``write_word``; all addresses are
    probed before the first write so failure leaves the store untouched.
    """
    for addr, _ in ps.patches:
        if store.read_word(addr) is None:
            raise UnmappedAddress(f"patch address {addr:#010x} is not mapped")
    for addr, value in ps.patches:
        store.write_word(addr, value)
