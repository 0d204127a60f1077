"""Firmware container handling: signature scanning and legacy U-Boot images.

The scanner recognizes the four container kinds that cover router-class
firmware: gzip streams, xz streams, LZMA-alone streams, and legacy 64-byte
U-Boot image headers.  It reports every magic hit in offset order and never
ranks them; policy belongs to the caller.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import Enum

from .errors import TruncatedContainer

UIMAGE_MAGIC = 0x27051956
UIMAGE_HEADER_LEN = 64

GZIP_MAGIC = b"\x1f\x8b"
XZ_MAGIC = b"\xfd7zXZ\x00"
LZMA_MAGIC_BYTE = 0x5D

# Dictionary sizes emitted by stock LZMA encoders: powers of two from 4 KiB
# to 256 MiB plus the 3*2^n ladder.  Anything else fails validation, which
# keeps the one-byte 0x5D magic from matching random data.
_LZMA_DICT_SIZES = frozenset(
    [1 << n for n in range(12, 29)] + [3 << n for n in range(11, 28)] + [0]
)


class RegionKind(str, Enum):
    GZIP = "gzip"
    XZ = "xz"
    LZMA = "lzma"
    UIMAGE = "uimage"
    RAW = "raw"


class Confidence(str, Enum):
    MAGIC_ONLY = "magic_only"
    HEADER_VALIDATED = "header_validated"


@dataclass(frozen=True)
class FirmwareImage:
    bytes: bytes
    origin: str = "<memory>"

    def __post_init__(self):
        if not self.bytes:
            raise ValueError("firmware image is empty")


@dataclass(frozen=True)
class EmbeddedRegion:
    offset: int
    kind: RegionKind
    confidence: Confidence


@dataclass(frozen=True)
class KernelBlob:
    bytes: bytes
    source_region: EmbeddedRegion

    def __post_init__(self):
        if not self.bytes:
            raise ValueError("kernel blob is empty")


@dataclass(frozen=True)
class UImageHeader:
    magic: int
    header_crc: int
    timestamp: int
    data_size: int
    load_addr: int
    entry_addr: int
    data_crc: int
    os: int
    arch: int
    img_type: int
    compression: int
    name: bytes

    _FMT = ">7I4B32s"

    @classmethod
    def parse(cls, buf: bytes) -> "UImageHeader":
        fields = struct.unpack_from(cls._FMT, buf)
        return cls(*fields)

    def pack(self) -> bytes:
        return struct.pack(
            self._FMT,
            self.magic,
            self.header_crc,
            self.timestamp,
            self.data_size,
            self.load_addr,
            self.entry_addr,
            self.data_crc,
            self.os,
            self.arch,
            self.img_type,
            self.compression,
            self.name,
        )

    def crc_valid(self) -> bool:
        zeroed = self.pack()[:4] + b"\x00\x00\x00\x00" + self.pack()[8:]
        return zlib.crc32(zeroed) == self.header_crc


def _validate_gzip(data: bytes, offset: int) -> bool:
    # RFC 1952: CM must be 8 (deflate) and the three reserved FLG bits zero.
    if offset + 10 > len(data):
        return False
    cm = data[offset + 2]
    flg = data[offset + 3]
    return cm == 8 and (flg & 0xE0) == 0


def _validate_xz(data: bytes, offset: int) -> bool:
    # Stream flags: first byte zero, second a defined check id.
    if offset + 8 > len(data):
        return False
    return data[offset + 6] == 0 and data[offset + 7] in (0x00, 0x01, 0x04, 0x0A)


def _validate_lzma(data: bytes, offset: int) -> bool:
    if offset + 13 > len(data):
        return False
    props = data[offset]
    if props >= 225:  # lc + lp*9 + pb*45 caps at 224
        return False
    dict_size = struct.unpack_from("<I", data, offset + 1)[0]
    return dict_size in _LZMA_DICT_SIZES


def scan_signatures(image: FirmwareImage) -> list[EmbeddedRegion]:
    """Report every container magic in the image, sorted by offset.

    gzip/xz/uimage hits are always reported, downgraded to ``magic_only``
    when their header fields do not parse.  LZMA-alone is only reported when
    its 5-byte properties field validates; the single 0x5D magic byte would
    otherwise fire on arbitrary data.
    """
    data = image.bytes
    regions = []

    pos = data.find(GZIP_MAGIC)
    while pos != -1:
        conf = (
            Confidence.HEADER_VALIDATED
            if _validate_gzip(data, pos)
            else Confidence.MAGIC_ONLY
        )
        regions.append(EmbeddedRegion(pos, RegionKind.GZIP, conf))
        pos = data.find(GZIP_MAGIC, pos + 1)

    pos = data.find(XZ_MAGIC)
    while pos != -1:
        conf = (
            Confidence.HEADER_VALIDATED
            if _validate_xz(data, pos)
            else Confidence.MAGIC_ONLY
        )
        regions.append(EmbeddedRegion(pos, RegionKind.XZ, conf))
        pos = data.find(XZ_MAGIC, pos + 1)

    for pos in range(len(data)):
        if data[pos] == LZMA_MAGIC_BYTE and _validate_lzma(data, pos):
            regions.append(
                EmbeddedRegion(pos, RegionKind.LZMA, Confidence.HEADER_VALIDATED)
            )

    magic_be = struct.pack(">I", UIMAGE_MAGIC)
    pos = data.find(magic_be)
    while pos != -1:
        conf = Confidence.MAGIC_ONLY
        if pos + UIMAGE_HEADER_LEN <= len(data):
            hdr = UImageHeader.parse(data[pos : pos + UIMAGE_HEADER_LEN])
            if hdr.crc_valid():
                conf = Confidence.HEADER_VALIDATED
        regions.append(EmbeddedRegion(pos, RegionKind.UIMAGE, conf))
        pos = data.find(magic_be, pos + 1)

    regions.sort(key=lambda r: (r.offset, r.kind.value))
    return regions


def extract_kernel(image: FirmwareImage, region: EmbeddedRegion) -> KernelBlob:
    """Cut the container payload out of the image.

    uimage containers carry an explicit data size; compressed streams do not
    encode their compressed length, so the blob runs to end of image and the
    decompressor stops at end of stream.
    """
    data = image.bytes
    if region.kind is RegionKind.UIMAGE:
        hdr_end = region.offset + UIMAGE_HEADER_LEN
        if hdr_end > len(data):
            raise TruncatedContainer(
                f"uimage header at {region.offset:#x} runs past end of image"
            )
        hdr = UImageHeader.parse(data[region.offset : hdr_end])
        payload_end = hdr_end + hdr.data_size
        if payload_end > len(data):
            raise TruncatedContainer(
                f"uimage at {region.offset:#x} declares {hdr.data_size} data bytes, "
                f"only {len(data) - hdr_end} remain"
            )
        return KernelBlob(data[hdr_end:payload_end], region)
    return KernelBlob(data[region.offset :], region)


def wrap_uimage(blob: bytes, load_addr: int, entry_addr: int, name: str = "") -> bytes:
    """Prepend a legacy U-Boot header (OS linux, arch ARM, type kernel).

    The timestamp is fixed at zero so identical payloads wrap to identical
    bytes.  ``extract_kernel`` on the result returns ``blob`` unchanged.
    """
    if not blob:
        raise ValueError("cannot wrap an empty payload")
    hdr = UImageHeader(
        magic=UIMAGE_MAGIC,
        header_crc=0,
        timestamp=0,
        data_size=len(blob),
        load_addr=load_addr & 0xFFFFFFFF,
        entry_addr=entry_addr & 0xFFFFFFFF,
        data_crc=zlib.crc32(blob),
        os=5,  # linux
        arch=2,  # arm
        img_type=2,  # kernel
        compression=0,
        name=name.encode("ascii", "replace")[:32].ljust(32, b"\x00"),
    )
    packed = hdr.pack()
    crc = zlib.crc32(packed[:4] + b"\x00\x00\x00\x00" + packed[8:])
    return packed[:4] + struct.pack(">I", crc) + packed[8:] + blob
