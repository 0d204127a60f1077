"""Locate the self-decompressor call, recover its output address, and unpack.

The decompressor stub that precedes every compressed kernel ends in a
fixed shape: a cache/BSS setup run (zeroing store loop, compare, low
branch, flag tests, a conditional call) followed by the four argument moves
into r0-r3 and the final call.  Matching is structural, on mnemonic classes
and the distinctive immediates (#0, #4, #0x10000), so register renaming
across toolchains does not break it.
"""

from __future__ import annotations

import lzma
import re
import zlib
from dataclasses import dataclass

from .constprop import ImageReader, RegisterState, run_block
from .container import Confidence, FirmwareImage, KernelBlob, RegionKind, scan_signatures
from .disasm import COND_AL, SP, Instruction, Klass
from .errors import CorruptStream, NoCompressedStream, PatternNotFound, Unrecoverable

DEFAULT_LOAD_BASE = 0xC0008000

_VERSION_RE = re.compile(rb"Linux version (\d+\.\d+(?:\.\d+)?[-\w.+]*)")


@dataclass(frozen=True)
class KernelImage:
    bytes: bytes
    load_base: int
    version: str | None = None

    def __post_init__(self):
        if not self.bytes:
            raise ValueError("kernel image is empty")
        if self.load_base % 4:
            raise ValueError("load base must be 4-aligned")


def _is_mov_imm(ins, value) -> bool:
    return ins.op == "mov" and ins.imm == value


def _is_str_post4(ins) -> bool:
    return (
        ins.op == "str"
        and not ins.pre_index
        and ins.writeback
        and ins.up
        and ins.imm == 4
    )


def _is_mov_reg(ins, rd) -> bool:
    return (
        ins.op == "mov"
        and ins.rd == rd
        and ins.rm is not None
        and ins.imm is None
        and ins.shift_amt == 0
        and ins.shift_reg is None
    )


def _window_matches(w: list[Instruction]) -> bool:
    return (
        _is_mov_imm(w[0], 0)
        and all(_is_str_post4(w[i]) for i in range(1, 5))
        and w[5].op == "cmp"
        and w[6].op == "b"
        and not w[6].is_call
        and w[6].cond != COND_AL
        and w[7].op == "tst"
        and w[7].imm == 1
        and w[8].op == "bic"
        and w[8].imm == 1
        and w[9].op == "bl"
        and w[9].cond != COND_AL
        and _is_mov_reg(w[10], 0)
        and _is_mov_reg(w[11], 1)
        and w[11].rm == SP
        and w[12].op == "add"
        and w[12].rn == SP
        and w[12].imm == 0x10000
        and _is_mov_reg(w[13], 3)
        and w[14].op == "bl"
        and w[14].cond == COND_AL
    )


_WINDOW = 15


def locate_decompress_call(instrs: list[Instruction]) -> int:
    """Address of the final BL of the first stub-shaped window."""
    for i in range(len(instrs) - _WINDOW + 1):
        if _window_matches(instrs[i : i + _WINDOW]):
            return instrs[i + _WINDOW - 1].addr
    raise PatternNotFound("no decompressor-stub window in instruction stream")


def straight_line_window(
    instrs: list[Instruction], call_addr: int
) -> list[Instruction]:
    """Longest branch-free suffix ending just before ``call_addr``."""
    idx = None
    for i, ins in enumerate(instrs):
        if ins.addr == call_addr:
            idx = i
            break
    if idx is None:
        raise ValueError(f"call address {call_addr:#x} not in instruction list")
    start = idx
    while start > 0:
        prev = instrs[start - 1]
        if prev.klass in (Klass.BRANCH_IMM, Klass.BRANCH_REG) or prev.writes_pc:
            break
        start -= 1
    return instrs[start:idx]


def recover_output_start(
    instrs: list[Instruction],
    call_addr: int,
    blob: bytes = b"",
    base: int = 0,
    init: RegisterState | None = None,
) -> int:
    """Value of r0 at the call, via constant propagation over the window."""
    window = straight_line_window(instrs, call_addr)
    image = ImageReader(blob, base) if blob else None
    state = run_block(window, init, image)
    r0 = state.get(0)
    if r0 is None:
        raise Unrecoverable("r0 is not statically known at the decompressor call")
    return r0


def decompress_payload(
    blob: KernelBlob,
    load_base: int | None = None,
) -> KernelImage:
    """Find the compressed stream inside the blob and inflate it.

    Tries every validated gzip/xz/LZMA region in offset order and returns the
    first that decodes.  ``load_base`` overrides the default placement.
    """
    image = FirmwareImage(blob.bytes, origin="<kernel blob>")
    regions = [
        r
        for r in scan_signatures(image)
        if r.kind in (RegionKind.GZIP, RegionKind.XZ, RegionKind.LZMA)
        and r.confidence is Confidence.HEADER_VALIDATED
    ]
    if not regions:
        raise NoCompressedStream("no gzip/xz/lzma stream inside the kernel blob")

    last_error: Exception | None = None
    for region in regions:
        payload = blob.bytes[region.offset :]
        try:
            if region.kind is RegionKind.GZIP:
                data = _gunzip(payload)
            elif region.kind is RegionKind.XZ:
                data = lzma.LZMADecompressor(format=lzma.FORMAT_XZ).decompress(payload)
            else:
                data = _unlzma_alone(payload)
        except (OSError, EOFError, lzma.LZMAError, zlib.error) as exc:
            last_error = exc
            continue
        if not data:
            continue
        base = load_base if load_base is not None else DEFAULT_LOAD_BASE
        return KernelImage(
            bytes=data, load_base=base, version=detect_kernel_version(data)
        )
    raise CorruptStream(f"all candidate streams failed to decode: {last_error}")


def _gunzip(payload: bytes) -> bytes:
    # tolerate trailing garbage after the stream, which zImage padding adds
    obj = zlib.decompressobj(wbits=16 + zlib.MAX_WBITS)
    out = obj.decompress(payload)
    out += obj.flush()
    return out


def _unlzma_alone(payload: bytes) -> bytes:
    dec = lzma.LZMADecompressor(format=lzma.FORMAT_ALONE)
    out = dec.decompress(payload)
    return out


def detect_kernel_version(kernel: bytes) -> str | None:
    """Dotted version token following the first "Linux version " marker."""
    m = _VERSION_RE.search(kernel)
    if not m:
        return None
    return m.group(1).decode("ascii")


def version_family(version: str) -> str:
    """Collapse a dotted version to its catalog family, e.g. 4.4.50 -> 4.4.x."""
    parts = version.split(".")
    if len(parts) < 2:
        return version
    return f"{parts[0]}.{parts[1]}.x"
