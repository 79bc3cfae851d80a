"""Frame format for compressed chunks (.zbf16 files and collective payloads).

Byte layout, little-endian throughout:

    offset  size  field
    0       4     magic "ZCCL"
    4       1     version (currently 1)
    5       1     flags (must be 0; bit 0 reserved for a future CRC)
    6       1     group_size_log2
    7       1     reserved (0)
    8       8     element_count (u64)
    16      8     zero_count (u64)
    24      8     codebook: 7 entry bytes, then entries[0] again as base byte
    32      24    section offsets, u32 each: sign_mantissa, plane0, plane1,
                  plane2, group_index, zero_exponents
    56      ..    zero padding to 128

Every section starts at a 128-byte multiple relative to the frame start and
is zero-padded to a 128-byte multiple; the total frame length is therefore
also a 128-byte multiple.  Everything up to and including group_index is the
static section whose length is static_size_bytes(element_count, group_size);
the zero_exponents section is the dynamic part.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .codec import (
    ALIGNMENT,
    HEADER_BYTES,
    CompressedChunk,
    ExponentCodebook,
    _pad,
    static_size_bytes,
)
from .errors import CorruptChunkError, CorruptFrameError, UnrepresentableError

MAGIC = b"ZCCL"
VERSION = 1

_HEADER = struct.Struct("<4sBBBBQQ7sB6I")
assert _HEADER.size == 56

_SECTION_NAMES = ("sign_mantissa", "plane0", "plane1", "plane2",
                  "group_index", "zero_exponents")


def section_offsets(element_count: int, group_size: int) -> tuple[int, ...]:
    """Canonical 128-aligned start offset of each section."""
    offs = []
    pos = _pad(HEADER_BYTES)
    plane_len = (element_count + 7) // 8
    n_groups = (element_count + group_size - 1) // group_size
    for size in (element_count, plane_len, plane_len, plane_len, 4 * n_groups):
        offs.append(pos)
        pos += _pad(size)
    offs.append(pos)  # zero_exponents
    return tuple(offs)


def serialize(chunk: CompressedChunk) -> bytes:
    """Serialize a chunk into one frame: deterministic, 128-byte aligned.

    The chunk's structure is checked; full plane/index consistency is the
    producer's responsibility (compress output always satisfies it) and is
    re-verified by parse on the receiving side.
    """
    chunk.check_structure()
    n, gs, zc = chunk.element_count, chunk.group_size, chunk.zero_count
    offs = section_offsets(n, gs)
    total = offs[-1] + _pad(zc)
    if total > 0xFFFFFFFF:
        raise UnrepresentableError(
            f"frame of {total} bytes exceeds the u32 section-offset range")

    buf = bytearray(total)
    entries = bytes(chunk.codebook.entries)
    buf[:_HEADER.size] = _HEADER.pack(
        MAGIC, VERSION, 0, gs.bit_length() - 1, 0,
        n, zc, entries, entries[0], *offs)

    sections = (
        chunk.sign_mantissa,
        chunk.exp_planes[0], chunk.exp_planes[1], chunk.exp_planes[2],
        chunk.group_index.astype("<u4"),
        chunk.zero_exponents,
    )
    for off, arr in zip(offs, sections):
        raw = arr.tobytes()
        buf[off:off + len(raw)] = raw
    return bytes(buf)


@dataclass(frozen=True)
class StaticDynamicSplit:
    """The static span (header through group index) and dynamic span of a frame."""

    static_bytes: bytes
    dynamic_bytes: bytes

    def recombine(self) -> bytes:
        return self.static_bytes + self.dynamic_bytes


def _fail(field: str, detail: str) -> CorruptFrameError:
    return CorruptFrameError(f"{field}: {detail}")


def parse_header(frame: bytes):
    """Validate and unpack the fixed header; returns the decoded fields."""
    if len(frame) < _HEADER.size:
        raise _fail("header", f"frame of {len(frame)} bytes is shorter than the header")
    (magic, version, flags, gs_log2, reserved, element_count, zero_count,
     entries, base_byte, *offs) = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise _fail("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise _fail("version", f"unsupported version {version}")
    if flags != 0:
        raise _fail("flags", f"unknown flag bits 0x{flags:02x}")
    if gs_log2 > 30:
        raise _fail("group_size_log2", f"implausible value {gs_log2}")
    if element_count < 1:
        raise _fail("element_count", "must be >= 1")
    if zero_count > element_count:
        raise _fail("zero_count", "exceeds element_count")
    if len(set(entries)) != 7:
        raise _fail("codebook", "entries are not pairwise distinct")
    if base_byte != entries[0]:
        raise _fail("codebook", "base byte disagrees with first entry")
    return element_count, zero_count, entries, gs_log2, tuple(offs)


def parse(frame: bytes) -> CompressedChunk:
    """Parse a frame back into a chunk, re-checking every invariant.

    Raises CorruptFrameError naming the first violated field; the returned
    chunk has additionally passed CompressedChunk.validate().
    """
    element_count, zero_count, entries, gs_log2, offs = parse_header(frame)
    group_size = 1 << gs_log2

    expected = section_offsets(element_count, group_size)
    for name, got, want in zip(_SECTION_NAMES, offs, expected):
        if got != want:
            raise _fail(f"{name} offset", f"expected {want}, got {got}")
        if got % ALIGNMENT:
            raise _fail(f"{name} offset", "not 128-byte aligned")

    total = expected[-1] + _pad(zero_count)
    if len(frame) != total:
        raise _fail("frame length", f"expected {total} bytes, got {len(frame)}")

    n = element_count
    plane_len = (n + 7) // 8
    n_groups = (n + group_size - 1) // group_size

    def section(idx: int, size: int) -> bytes:
        return frame[offs[idx]:offs[idx] + size]

    chunk = CompressedChunk(
        element_count=n,
        group_size=group_size,
        codebook=ExponentCodebook(tuple(entries)),
        sign_mantissa=np.frombuffer(section(0, n), dtype=np.uint8),
        exp_planes=tuple(
            np.frombuffer(section(1 + b, plane_len), dtype=np.uint8)
            for b in range(3)),
        group_index=np.frombuffer(section(4, 4 * n_groups), dtype="<u4"),
        zero_exponents=np.frombuffer(section(5, zero_count), dtype=np.uint8),
    )
    try:
        chunk.validate()
    except CorruptChunkError as exc:
        raise CorruptFrameError(str(exc)) from exc
    return chunk


def split_static_dynamic(frame: bytes) -> StaticDynamicSplit:
    """Split a frame into its pre-sizable static span and its dynamic span.

    The static length depends only on element_count and group_size, so a
    receiver that knows the element count can post the static transfer
    before learning anything about the data.
    """
    element_count, _, _, gs_log2, _ = parse_header(frame)
    static_len = static_size_bytes(element_count, 1 << gs_log2)
    if len(frame) < static_len:
        raise _fail("frame length", "shorter than its static section")
    return StaticDynamicSplit(frame[:static_len], frame[static_len:])


def write_zbf16(path, chunk: CompressedChunk) -> int:
    frame = serialize(chunk)
    with open(path, "wb") as fh:
        fh.write(frame)
    return len(frame)


def read_zbf16(path) -> CompressedChunk:
    with open(path, "rb") as fh:
        return parse(fh.read())
