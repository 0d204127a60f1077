"""ARM short-descriptor page-walk simulation with an opaque-window hijack.

Translations inside the opaque virtual range resolve through a simulator
owned table into a backing store that guest physical memory never sees;
everything else performs a two-level walk (1 MiB sections, 4 KiB small
pages) over the guest's own tables.  Loading code into the opaque window
therefore cannot perturb any guest-visible byte, which is the property the
whole arrangement exists to provide.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

from .errors import GuestFault, ImageTooLarge, OutOfOpaqueRange, UnmappedAddress

DEFAULT_OPAQUE_BASE = 0xD0000000
DEFAULT_OPAQUE_LEN = 0x10000

PAGE = 0x1000


class Source(str, Enum):
    GUEST = "guest"
    HIJACK = "hijack"


class Access(str, Enum):
    READ = "read"
    WRITE = "write"
    EXEC = "exec"


@dataclass(frozen=True)
class Perms:
    read: bool
    write: bool
    execute: bool

    def allows(self, access: Access) -> bool:
        if access is Access.READ:
            return self.read
        if access is Access.WRITE:
            return self.write
        return self.execute


@dataclass(frozen=True)
class Translation:
    paddr: int
    source: Source
    perms: Perms


class SparseMemory:
    """Page-granular sparse physical store with explicit mapping."""

    def __init__(self):
        self._pages: dict[int, bytearray] = {}

    def map_region(self, start: int, size: int):
        for page in range(start // PAGE, -(-(start + size) // PAGE)):
            self._pages.setdefault(page, bytearray(PAGE))

    def is_mapped(self, addr: int) -> bool:
        return addr // PAGE in self._pages

    def read(self, addr: int, size: int) -> bytes:
        out = bytearray()
        while size:
            page, off = divmod(addr, PAGE)
            if page not in self._pages:
                raise UnmappedAddress(f"physical read at {addr:#010x}")
            chunk = min(size, PAGE - off)
            out += self._pages[page][off : off + chunk]
            addr += chunk
            size -= chunk
        return bytes(out)

    def write(self, addr: int, data: bytes):
        pos = 0
        while pos < len(data):
            page, off = divmod(addr + pos, PAGE)
            if page not in self._pages:
                raise UnmappedAddress(f"physical write at {addr + pos:#010x}")
            chunk = min(len(data) - pos, PAGE - off)
            self._pages[page][off : off + chunk] = data[pos : pos + chunk]
            pos += chunk

    def read_word(self, addr: int) -> int | None:
        try:
            return struct.unpack("<I", self.read(addr, 4))[0]
        except UnmappedAddress:
            return None

    def write_word(self, addr: int, value: int):
        self.write(addr, struct.pack("<I", value & 0xFFFFFFFF))

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for page in sorted(self._pages):
            digest.update(page.to_bytes(8, "little"))
            digest.update(self._pages[page])
        return digest.hexdigest()


def section_descriptor(phys_base: int, writable=True, executable=True) -> int:
    """1 MiB section descriptor with the permission bits this walker decodes."""
    desc = (phys_base & 0xFFF00000) | 0x2
    desc |= 1 << 10  # AP[0]: kernel access
    if not writable:
        desc |= 1 << 15  # APX: read-only
    if not executable:
        desc |= 1 << 4  # XN
    return desc


def coarse_table_descriptor(l2_base: int) -> int:
    return (l2_base & 0xFFFFFC00) | 0x1


def small_page_descriptor(phys_base: int, writable=True, executable=True) -> int:
    desc = (phys_base & 0xFFFFF000) | 0x2
    desc |= 1 << 4  # AP[0]
    if not writable:
        desc |= 1 << 9  # APX
    if not executable:
        desc |= 1  # XN turns type 2 into type 3
    return desc


@dataclass
class AddressSpace:
    phys: SparseMemory
    ttbr: int
    opaque_base: int = DEFAULT_OPAQUE_BASE
    opaque_len: int = DEFAULT_OPAQUE_LEN
    opaque_backing: bytearray = field(default_factory=bytearray)
    hijack_l1: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.opaque_base + self.opaque_len > 1 << 32:
            raise ValueError("opaque range wraps the address space")
        if not self.opaque_backing:
            self.opaque_backing = bytearray(self.opaque_len)
        # the hijack table has a valid entry for every section the window
        # touches; the mapping is identity-within-backing
        first = self.opaque_base >> 20
        last = (self.opaque_base + self.opaque_len - 1) >> 20
        for section in range(first, last + 1):
            self.hijack_l1.setdefault(
                section, (section << 20) - self.opaque_base
            )

    # -- translation ----------------------------------------------------------

    def in_opaque(self, vaddr: int) -> bool:
        return self.opaque_base <= vaddr < self.opaque_base + self.opaque_len

    def translate(self, vaddr: int, access: Access = Access.READ) -> Translation:
        vaddr &= 0xFFFFFFFF
        if self.in_opaque(vaddr):
            base_off = self.hijack_l1[vaddr >> 20]
            return Translation(
                paddr=(base_off + (vaddr & 0xFFFFF)) & 0xFFFFFFFF,
                source=Source.HIJACK,
                perms=Perms(True, True, True),
            )
        return self._guest_walk(vaddr, access)

    def _guest_walk(self, vaddr: int, access: Access) -> Translation:
        l1_addr = (self.ttbr & ~0x3FFF) + ((vaddr >> 20) << 2)
        desc = self.phys.read_word(l1_addr)
        if desc is None or desc & 3 == 0 or desc & 3 == 3:
            raise GuestFault(1, vaddr)
        if desc & 3 == 2:
            if desc & (1 << 18):
                raise GuestFault(1, vaddr, "unsupported-supersection")
            perms = Perms(
                read=True,
                write=not desc & (1 << 15),
                execute=not desc & (1 << 4),
            )
            if not perms.allows(access):
                raise GuestFault(1, vaddr, "perm")
            return Translation(
                paddr=(desc & 0xFFF00000) | (vaddr & 0xFFFFF),
                source=Source.GUEST,
                perms=perms,
            )
        l2_addr = (desc & 0xFFFFFC00) + (((vaddr >> 12) & 0xFF) << 2)
        l2 = self.phys.read_word(l2_addr)
        if l2 is None or l2 & 3 == 0:
            raise GuestFault(2, vaddr)
        if l2 & 3 == 1:
            raise GuestFault(2, vaddr, "unsupported-largepage")
        perms = Perms(
            read=True,
            write=not l2 & (1 << 9),
            execute=not l2 & 1,
        )
        if not perms.allows(access):
            raise GuestFault(2, vaddr, "perm")
        return Translation(
            paddr=(l2 & 0xFFFFF000) | (vaddr & 0xFFF),
            source=Source.GUEST,
            perms=perms,
        )

    # -- opaque window management ----------------------------------------------

    def map_opaque(self, vaddr_offset: int, length: int):
        """Validate a window; the hijack table is always fully valid."""
        if vaddr_offset < 0 or length < 0 or vaddr_offset + length > self.opaque_len:
            raise OutOfOpaqueRange(
                f"window {vaddr_offset:#x}+{length:#x} exceeds {self.opaque_len:#x}"
            )

    def load_driver(self, drv) -> None:
        """Copy a patched driver image into the opaque backing store."""
        if not self.in_opaque(drv.load_addr):
            raise ImageTooLarge(
                f"load address {drv.load_addr:#010x} outside the opaque range"
            )
        offset = drv.load_addr - self.opaque_base
        if offset + len(drv.image) > self.opaque_len:
            raise ImageTooLarge(
                f"image of {len(drv.image):#x} bytes does not fit at "
                f"{drv.load_addr:#010x}"
            )
        self.opaque_backing[offset : offset + len(drv.image)] = drv.image

    # -- byte access through translation ----------------------------------------

    def read(self, vaddr: int, size: int, access: Access = Access.READ) -> bytes:
        out = bytearray()
        while size:
            tr = self.translate(vaddr, access)
            chunk = min(size, PAGE - (vaddr & (PAGE - 1)))
            if tr.source is Source.HIJACK:
                chunk = min(chunk, self.opaque_len - tr.paddr)
                out += self.opaque_backing[tr.paddr : tr.paddr + chunk]
            else:
                out += self.phys.read(tr.paddr, chunk)
            vaddr += chunk
            size -= chunk
        return bytes(out)

    def write(self, vaddr: int, data: bytes):
        pos = 0
        while pos < len(data):
            tr = self.translate(vaddr + pos, Access.WRITE)
            chunk = min(len(data) - pos, PAGE - ((vaddr + pos) & (PAGE - 1)))
            if tr.source is Source.HIJACK:
                chunk = min(chunk, self.opaque_len - tr.paddr)
                self.opaque_backing[tr.paddr : tr.paddr + chunk] = data[
                    pos : pos + chunk
                ]
            else:
                self.phys.write(tr.paddr, data[pos : pos + chunk])
            pos += chunk

    def fetch_exec(self, vaddr: int, count: int) -> bytes:
        """Fetch ``count`` bytes with execute permission checks."""
        return self.read(vaddr, count, Access.EXEC)

    def read_word(self, vaddr: int, access: Access = Access.READ) -> int:
        return struct.unpack("<I", self.read(vaddr, 4, access))[0]

    def write_word(self, vaddr: int, value: int):
        self.write(vaddr, struct.pack("<I", value & 0xFFFFFFFF))
