"""Container scanning and legacy U-Boot header handling."""

import gzip
import lzma
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transplantkit.container import (
    Confidence,
    EmbeddedRegion,
    FirmwareImage,
    KernelBlob,
    RegionKind,
    UIMAGE_HEADER_LEN,
    UImageHeader,
    extract_kernel,
    scan_signatures,
    wrap_uimage,
)
from transplantkit.errors import TruncatedContainer


def crc32_reference(data: bytes) -> int:
    """Bitwise CRC-32 (reflected 0xEDB88320), independent of zlib."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def test_all_zero_image_has_no_regions():
    image = FirmwareImage(bytes(4096))
    assert scan_signatures(image) == []


def test_uimage_at_offset_zero_is_header_validated():
    wrapped = wrap_uimage(b"payload-bytes", 0x8000, 0x8000)
    regions = scan_signatures(FirmwareImage(wrapped))
    assert any(
        r.offset == 0
        and r.kind is RegionKind.UIMAGE
        and r.confidence is Confidence.HEADER_VALIDATED
        for r in regions
    )


def test_gzip_after_junk_found_and_validated():
    stream = gzip.compress(b"hello", mtime=0)
    image = FirmwareImage(b"\xaa" * 100 + stream)
    regions = scan_signatures(image)
    hits = [r for r in regions if r.kind is RegionKind.GZIP]
    assert hits == [EmbeddedRegion(100, RegionKind.GZIP, Confidence.HEADER_VALIDATED)]
    assert gzip.decompress(image.bytes[100:]) == b"hello"


def test_xz_and_lzma_magic_detection():
    xz = lzma.compress(b"x" * 100, format=lzma.FORMAT_XZ)
    alone = lzma.compress(b"y" * 100, format=lzma.FORMAT_ALONE)
    image = FirmwareImage(b"junk" + xz + b"gap!" + alone)
    kinds = {(r.kind, r.offset) for r in scan_signatures(image)}
    assert (RegionKind.XZ, 4) in kinds
    assert (RegionKind.LZMA, 4 + len(xz) + 4) in kinds


def test_lzma_weak_magic_rejected_on_bad_dict_size():
    # 0x5D followed by an implausible dictionary size must not be reported
    fake = bytes([0x5D]) + struct.pack("<I", 0x1234) + bytes(16)
    assert scan_signatures(FirmwareImage(fake)) == []


def test_scan_is_pure(any_family_kernel):
    image = FirmwareImage(gzip.compress(any_family_kernel.flat[:4096], mtime=0))
    assert scan_signatures(image) == scan_signatures(image)


def test_extract_uimage_payload_size():
    wrapped = wrap_uimage(b"k" * 16, 0, 0)
    region = scan_signatures(FirmwareImage(wrapped))[0]
    blob = extract_kernel(FirmwareImage(wrapped), region)
    assert blob.bytes == b"k" * 16
    assert len(wrapped) == UIMAGE_HEADER_LEN + 16


def test_extract_raw_region_is_identity():
    image = FirmwareImage(b"\x01\x02\x03\x04" * 8)
    region = EmbeddedRegion(0, RegionKind.RAW, Confidence.MAGIC_ONLY)
    assert extract_kernel(image, region).bytes == image.bytes


def test_truncated_uimage_raises():
    wrapped = bytearray(wrap_uimage(b"z" * 200, 0, 0))
    struct.pack_into(">I", wrapped, 12, 1000)  # declare more than remains
    region = EmbeddedRegion(0, RegionKind.UIMAGE, Confidence.MAGIC_ONLY)
    with pytest.raises(TruncatedContainer):
        extract_kernel(FirmwareImage(bytes(wrapped)), region)


def test_wrap_extract_roundtrip_identity():
    payload = bytes(range(256)) * 3
    wrapped = wrap_uimage(payload, 0xC0008000, 0xC0008000)
    region = scan_signatures(FirmwareImage(wrapped))[0]
    assert extract_kernel(FirmwareImage(wrapped), region).bytes == payload


def test_wrap_uimage_data_size_field():
    wrapped = wrap_uimage(b"abc", 0x1000, 0x2000)
    hdr = UImageHeader.parse(wrapped[:UIMAGE_HEADER_LEN])
    assert hdr.data_size == 3
    assert hdr.load_addr == 0x1000
    assert hdr.entry_addr == 0x2000


def test_wrap_is_idempotent_on_payload():
    payload = b"some kernel payload"
    once = wrap_uimage(payload, 1 << 12, 1 << 12)
    image = FirmwareImage(once)
    inner = extract_kernel(image, scan_signatures(image)[0]).bytes
    again = wrap_uimage(inner, 1 << 12, 1 << 12)
    assert again == once


def test_header_and_data_crc_match_independent_reference():
    rng = random.Random(0xC3C)
    for _ in range(50):
        payload = rng.randbytes(rng.randrange(1, 4096))
        wrapped = wrap_uimage(payload, 0x8000, 0x8040)
        hdr = UImageHeader.parse(wrapped[:UIMAGE_HEADER_LEN])
        assert hdr.data_crc == crc32_reference(payload)
        zeroed = wrapped[:4] + b"\x00" * 4 + wrapped[8:UIMAGE_HEADER_LEN]
        assert hdr.header_crc == crc32_reference(zeroed)
        assert hdr.crc_valid()


def test_extracted_uimage_payload_matches_declared_crc():
    payload = b"crc-checked payload"
    wrapped = wrap_uimage(payload, 0, 0)
    image = FirmwareImage(wrapped)
    region = scan_signatures(image)[0]
    blob = extract_kernel(image, region)
    hdr = UImageHeader.parse(wrapped[:UIMAGE_HEADER_LEN])
    assert crc32_reference(blob.bytes) == hdr.data_crc


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=1, max_size=2048))
def test_wrap_extract_roundtrip_property(payload):
    wrapped = wrap_uimage(payload, 0x100, 0x100)
    image = FirmwareImage(wrapped)
    regions = [r for r in scan_signatures(image) if r.offset == 0]
    assert regions and regions[0].kind is RegionKind.UIMAGE
    assert extract_kernel(image, regions[0]).bytes == payload


def test_empty_blob_rejected():
    with pytest.raises(ValueError):
        KernelBlob(b"", EmbeddedRegion(0, RegionKind.RAW, Confidence.MAGIC_ONLY))
    with pytest.raises(ValueError):
        wrap_uimage(b"", 0, 0)
