"""Line-oriented scenario driver for the MMU simulator.

A scenario file sets up guest tables and the opaque window, then issues
translate/load/read commands.  Every line is echoed into the transcript
with its outcome, which makes scenario runs diffable golden files.

Directives::

    phys-map <addr> <size>            back a physical region with zeros
    ttbr <addr>                       set the guest L1 table base
    opaque <base> <len>               configure the opaque window
    section <vaddr> <paddr> [ro] [nx] write an L1 section descriptor
    coarse <vaddr> <l2-paddr>         write an L1 coarse-table descriptor
    page <vaddr> <paddr> [ro] [nx]    write an L2 small-page descriptor
    write-phys <addr> <hex>           raw bytes into physical memory
    write-virt <addr> <hex>           bytes through translation
    load-driver <path> <load-addr>    patched driver image into the window
    map-opaque <offset> <len>         validate an opaque sub-window
    translate <vaddr> <read|write|exec>
    read-virt <addr> <len>
    hash-phys                         digest of all mapped physical bytes
"""

from __future__ import annotations

from pathlib import Path

from .driver import PatchedDriver
from .errors import GuestFault, ToolError
from .mmu import (
    Access,
    AddressSpace,
    SparseMemory,
    coarse_table_descriptor,
    section_descriptor,
    small_page_descriptor,
)


def _num(token: str) -> int:
    return int(token, 0)


def _perm_flags(args: list[str]) -> tuple[bool, bool]:
    return "ro" not in args, "nx" not in args


class ScenarioRunner:
    def __init__(self):
        self.phys = SparseMemory()
        self.ttbr = 0
        self.space: AddressSpace | None = None
        self.lines: list[str] = []

    def _ensure_space(self) -> AddressSpace:
        if self.space is None:
            self.space = AddressSpace(phys=self.phys, ttbr=self.ttbr)
        return self.space

    def _emit(self, line: str, result: str):
        self.lines.append(f"{line} -> {result}")

    def _l1_slot(self, vaddr: int) -> int:
        return (self.ttbr & ~0x3FFF) + ((vaddr >> 20) << 2)

    def run_line(self, raw: str):
        line = raw.strip()
        if not line or line.startswith("#"):
            self.lines.append(raw.rstrip("\n"))
            return
        cmd, *args = line.split()
        try:
            handler = getattr(self, "_cmd_" + cmd.replace("-", "_"), None)
            if handler is None:
                self._emit(line, "error unknown-directive")
                return
            handler(line, args)
        except (ToolError, ValueError, OSError) as exc:
            code = getattr(exc, "code", "error")
            if isinstance(exc, GuestFault):
                self._emit(
                    line, f"fault level={exc.level} reason={exc.reason}"
                )
            else:
                self._emit(line, f"error {code}")

    def _cmd_phys_map(self, line, args):
        self.phys.map_region(_num(args[0]), _num(args[1]))
        self._emit(line, "ok")

    def _cmd_ttbr(self, line, args):
        self.ttbr = _num(args[0])
        if self.space is not None:
            self.space.ttbr = self.ttbr
        self._emit(line, "ok")

    def _cmd_opaque(self, line, args):
        self.space = AddressSpace(
            phys=self.phys,
            ttbr=self.ttbr,
            opaque_base=_num(args[0]),
            opaque_len=_num(args[1]),
        )
        self._emit(line, "ok")

    def _cmd_section(self, line, args):
        writable, executable = _perm_flags(args[2:])
        desc = section_descriptor(_num(args[1]), writable, executable)
        self.phys.write_word(self._l1_slot(_num(args[0])), desc)
        self._emit(line, "ok")

    def _cmd_coarse(self, line, args):
        self.phys.write_word(
            self._l1_slot(_num(args[0])), coarse_table_descriptor(_num(args[1]))
        )
        self._emit(line, "ok")

    def _cmd_page(self, line, args):
        vaddr = _num(args[0])
        l1 = self.phys.read_word(self._l1_slot(vaddr))
        if l1 is None or l1 & 3 != 1:
            self._emit(line, "error no-coarse-table")
            return
        writable, executable = _perm_flags(args[2:])
        slot = (l1 & 0xFFFFFC00) + (((vaddr >> 12) & 0xFF) << 2)
        self.phys.write_word(slot, small_page_descriptor(_num(args[1]), writable, executable))
        self._emit(line, "ok")

    def _cmd_write_phys(self, line, args):
        self.phys.write(_num(args[0]), bytes.fromhex(args[1]))
        self._emit(line, "ok")

    def _cmd_write_virt(self, line, args):
        self._ensure_space().write(_num(args[0]), bytes.fromhex(args[1]))
        self._emit(line, "ok")

    def _cmd_load_driver(self, line, args):
        image = Path(args[0]).read_bytes()
        load_addr = _num(args[1])
        drv = PatchedDriver(
            image=image,
            load_addr=load_addr,
            entry_map={},
            code_len=len(image),
            bss_offset=len(image),
            bss_size=0,
        )
        self._ensure_space().load_driver(drv)
        self._emit(line, f"ok bytes={len(image)}")

    def _cmd_map_opaque(self, line, args):
        self._ensure_space().map_opaque(_num(args[0]), _num(args[1]))
        self._emit(line, "ok")

    def _cmd_translate(self, line, args):
        access = Access(args[1])
        tr = self._ensure_space().translate(_num(args[0]), access)
        perms = "".join(
            flag if ok else "-"
            for flag, ok in (
                ("r", tr.perms.read),
                ("w", tr.perms.write),
                ("x", tr.perms.execute),
            )
        )
        self._emit(line, f"paddr={tr.paddr:#010x} source={tr.source.value} perms={perms}")

    def _cmd_read_virt(self, line, args):
        data = self._ensure_space().read(_num(args[0]), _num(args[1]))
        self._emit(line, data.hex())

    def _cmd_hash_phys(self, line, args):
        self._emit(line, self.phys.content_hash())

    def transcript(self) -> str:
        return "\n".join(self.lines) + "\n"


def run_scenario(text: str) -> str:
    runner = ScenarioRunner()
    for raw in text.splitlines():
        runner.run_line(raw)
    return runner.transcript()
