"""Lossless BF16 exponent codec.

Each element is split into a sign-mantissa byte ((sign << 7) | mantissa) and
its 8-bit biased exponent.  Exponents found in a 7-entry codebook shrink to a
3-bit code (1..7); anything else gets the escape code 0 and its raw exponent
byte is appended to a per-chunk escape list.  The 3-bit codes are stored as
three 1-bit planes, each packed LSB-first (element j -> byte j//8, bit j%8).
An exclusive prefix sum of escape counts per GROUP_SIZE-element group lets a
decoder jump into the escape list at any group boundary.

For zero-mean Gaussian data the best codebook is a contiguous window of seven
exponents whose placement follows from the data's standard deviation alone;
see optimal_base_exponent for the closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .bf16 import EXP_BIAS, as_words, exponent_bits, measure_sigma
from .errors import CorruptChunkError, DegenerateDataError, UnrepresentableError

__all__ = [
    "GROUP_SIZE",
    "WINDOW_WIDTH",
    "WINDOW_OPT_U",
    "BASE_EXPONENT_OFFSET",
    "ExponentCodebook",
    "CompressedChunk",
    "window_coverage",
    "optimal_base_exponent",
    "derive_codebook",
    "codebook_for",
    "measure_sigma",
    "compress",
    "decompress",
    "decompress_group",
    "static_section_sizes",
    "static_size_bytes",
]

# Seven codebook slots; code 0 is the escape.
WINDOW_WIDTH = 7

# Default elements per group-index entry.  512 amortizes the 4-byte index to
# <0.1 bit/element while keeping random access reasonably fine-grained.
GROUP_SIZE = 512

# Stationary point of the window coverage: the lower window edge, in units of
# sigma*sqrt(2), at which a 7-exponent window captures maximal probability
# mass.  Solves 128*exp(-(128u)^2) = exp(-u^2), i.e. u = sqrt(7*ln2 / 16383).
WINDOW_OPT_U = math.sqrt(7.0 * math.log(2.0) / 16383.0)

# Additive constant of the optimal base exponent: x_opt = log2(sigma) + this.
BASE_EXPONENT_OFFSET = 0.5 * math.log2(14.0 * math.log(2.0) / 16383.0)

# Biased base range keeping the whole 7-entry window inside [1, 254], so the
# reserved fields 0 (zero/subnormal) and 255 (Inf/NaN) always escape.
_MIN_BASE = 1 - EXP_BIAS
_MAX_BASE = 254 - EXP_BIAS - (WINDOW_WIDTH - 1)


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not math.isfinite(sigma) or sigma <= 0.0:
        raise ValueError(f"sigma must be positive and finite, got {sigma!r}")
    return sigma


def window_coverage(sigma: float, x: float) -> float:
    """Probability that |N(0, sigma^2)| lands in [2**x, 2**(x+7)).

    Equals erf(2**(x+7) / (sigma*sqrt(2))) - erf(2**x / (sigma*sqrt(2))),
    the mass a 7-exponent window starting at unbiased exponent x captures.
    x may be fractional; the codec only ever uses integer bases.
    """
    sigma = _check_sigma(sigma)
    x = float(x)
    try:
        lo = 2.0**x
    except OverflowError:
        lo = math.inf
    hi = lo * 128.0
    scale = sigma * math.sqrt(2.0)
    return math.erf(hi / scale) - math.erf(lo / scale)


def optimal_base_exponent(sigma: float) -> float:
    """Real-valued base exponent maximizing window_coverage for this sigma.

    Closed form: log2(sigma) + 0.5*log2(14*ln2/16383), about log2(sigma) - 5.36.
    """
    sigma = _check_sigma(sigma)
    return math.log2(sigma) + BASE_EXPONENT_OFFSET


@dataclass(frozen=True)
class ExponentCodebook:
    """Seven distinct biased exponents, entry i encoded as 3-bit code i+1.

    Code 0 is reserved as the escape for exponents outside the book.
    """

    entries: tuple[int, ...]

    def __post_init__(self):
        if len(self.entries) != WINDOW_WIDTH:
            raise ValueError(f"codebook needs exactly {WINDOW_WIDTH} entries")
        if any(not (0 <= e <= 255) for e in self.entries):
            raise ValueError("codebook entries must be biased exponents in [0, 255]")
        if len(set(self.entries)) != WINDOW_WIDTH:
            raise ValueError("codebook entries must be pairwise distinct")
        object.__setattr__(self, "entries", tuple(int(e) for e in self.entries))

    @property
    def base(self) -> int:
        """Unbiased exponent of the first entry."""
        return self.entries[0] - EXP_BIAS

    @classmethod
    def from_base(cls, base: int) -> "ExponentCodebook":
        """Contiguous window {base+127, ..., base+133}, shifted into [1, 254]."""
        base = min(max(int(base), _MIN_BASE), _MAX_BASE)
        first = base + EXP_BIAS
        return cls(tuple(range(first, first + WINDOW_WIDTH)))

    @cached_property
    def encode_table(self) -> np.ndarray:
        """256-entry uint8 lookup: biased exponent -> code (0 = escape)."""
        table = np.zeros(256, dtype=np.uint8)
        for i, e in enumerate(self.entries):
            table[e] = i + 1
        table.setflags(write=False)
        return table

    @cached_property
    def decode_table(self) -> np.ndarray:
        """8-entry uint8 lookup: code 1..7 -> biased exponent (slot 0 unused)."""
        table = np.zeros(8, dtype=np.uint8)
        table[1:] = self.entries
        table.setflags(write=False)
        return table


def derive_codebook(sigma: float) -> ExponentCodebook:
    """Analytic codebook for zero-mean Gaussian data with standard deviation sigma.

    Rounds the real optimum to the better of floor/ceil by comparing actual
    window coverage (tie goes to floor), then builds the contiguous window.
    """
    x_opt = optimal_base_exponent(sigma)
    lo, hi = math.floor(x_opt), math.ceil(x_opt)
    if lo == hi or window_coverage(sigma, lo) >= window_coverage(sigma, hi):
        base = lo
    else:
        base = hi
    return ExponentCodebook.from_base(base)


def codebook_for(data, sigma: float | None = None) -> ExponentCodebook:
    """Codebook for a buffer: analytic when sigma is usable, modal otherwise.

    With sigma None it is measured from the buffer.  If sigma is zero,
    non-finite, or unmeasurable (no finite elements), fall back to a window
    centered on the buffer's most frequent biased exponent; an all +/-0
    buffer gets base -6 (arbitrary: every codebook is lossless, only the
    escape rate varies).
    """
    words = as_words(data)
    if sigma is None:
        try:
            sigma = measure_sigma(words)
        except DegenerateDataError:
            sigma = 0.0
    if math.isfinite(sigma) and sigma > 0.0:
        return derive_codebook(sigma)
    counts = np.bincount(exponent_bits(words), minlength=256)
    mode = int(counts.argmax())
    if mode == 0 and counts[0] == words.size:
        return ExponentCodebook.from_base(-6)
    return ExponentCodebook.from_base(mode - EXP_BIAS - WINDOW_WIDTH // 2)


@dataclass(frozen=True, eq=False)
class CompressedChunk:
    """A compressed BF16 buffer, self-contained for decoding.

    sign_mantissa, exp_planes, group_index and the codebook form the static
    section (size a pure function of element_count and group_size);
    zero_exponents is the dynamic section, one raw exponent byte per escaped
    element in element order.
    """

    element_count: int
    group_size: int
    codebook: ExponentCodebook
    sign_mantissa: np.ndarray      # uint8[element_count]
    exp_planes: tuple[np.ndarray, np.ndarray, np.ndarray]  # uint8[ceil(n/8)] each
    group_index: np.ndarray        # uint32[ceil(n/group_size)], exclusive prefix sums
    zero_exponents: np.ndarray     # uint8[zero_count]

    @property
    def zero_count(self) -> int:
        return int(self.zero_exponents.size)

    def check_structure(self) -> None:
        """Cheap invariants: field sizes and index shape, no plane decoding."""
        n = self.element_count
        if n < 1:
            raise CorruptChunkError("element_count: must be >= 1")
        gs = self.group_size
        if gs < 1 or gs & (gs - 1):
            raise CorruptChunkError("group_size: must be a power of two")
        if self.sign_mantissa.size != n:
            raise CorruptChunkError(
                f"sign_mantissa: expected {n} bytes, got {self.sign_mantissa.size}")
        plane_len = (n + 7) // 8
        for b, plane in enumerate(self.exp_planes):
            if plane.size != plane_len:
                raise CorruptChunkError(
                    f"exp_planes[{b}]: expected {plane_len} bytes, got {plane.size}")
        n_groups = (n + gs - 1) // gs
        gi = self.group_index
        if gi.size != n_groups:
            raise CorruptChunkError(
                f"group_index: expected {n_groups} entries, got {gi.size}")
        if gi[0] != 0:
            raise CorruptChunkError("group_index: first entry must be 0")
        if np.any(np.diff(gi.astype(np.int64)) < 0):
            raise CorruptChunkError("group_index: must be monotone non-decreasing")
        if self.zero_count > n:
            raise CorruptChunkError("zero_count: exceeds element_count")

    def _check_consistency(self, codes: np.ndarray) -> None:
        """Escape counts in the planes must match group_index and zero_count."""
        n, gs = self.element_count, self.group_size
        group_zeros = np.add.reduceat(
            (codes == 0).astype(np.int64), np.arange(0, n, gs))
        gi = self.group_index.astype(np.int64)
        if np.any(np.diff(gi) != group_zeros[:-1]) or gi[0] != 0:
            raise CorruptChunkError(
                "group_index: disagrees with escape counts in planes")
        if int(group_zeros.sum()) != self.zero_count:
            raise CorruptChunkError(
                f"zero_count: planes contain {int(group_zeros.sum())} escapes, "
                f"zero_exponents holds {self.zero_count}")

    def validate(self) -> None:
        """Re-check every invariant; raises CorruptChunkError naming the field."""
        self.check_structure()
        self._check_consistency(self._unpack_codes())

    def _unpack_codes(self) -> np.ndarray:
        n = self.element_count
        p0, p1, p2 = (
            np.unpackbits(p, count=n, bitorder="little") for p in self.exp_planes)
        return (p0 | (p1 << 1) | (p2 << 2)).astype(np.uint8)


def compress(data, codebook: ExponentCodebook,
             group_size: int = GROUP_SIZE) -> CompressedChunk:
    """Compress a BF16 buffer under the given codebook.

    Deterministic and lossless for all 65536 word patterns; exponents outside
    the codebook (always including 0 and 255 for derived books) escape to the
    dynamic section.
    """
    words = as_words(data)
    n = words.size
    if n == 0:
        raise ValueError("compress: empty buffer")
    if group_size < 1 or group_size & (group_size - 1):
        raise ValueError("group_size must be a power of two")

    sign_mantissa = (((words >> 8) & 0x80) | (words & 0x7F)).astype(np.uint8)
    exponents = exponent_bits(words)
    codes = codebook.encode_table[exponents]

    escapes = codes == 0
    zero_exponents = exponents[escapes]
    if zero_exponents.size >= 1 << 32:
        raise UnrepresentableError("zero_count does not fit the 32-bit group index")

    planes = tuple(
        np.packbits(((codes >> b) & 1), bitorder="little") for b in range(3))

    group_starts = np.arange(0, n, group_size)
    group_zeros = np.add.reduceat(escapes.astype(np.uint32), group_starts)
    group_index = np.empty(group_zeros.size, dtype=np.uint32)
    group_index[0] = 0
    np.cumsum(group_zeros[:-1], out=group_index[1:])

    return CompressedChunk(
        element_count=n,
        group_size=group_size,
        codebook=codebook,
        sign_mantissa=sign_mantissa,
        exp_planes=planes,
        group_index=group_index,
        zero_exponents=zero_exponents,
    )


def _reassemble(sign_mantissa: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    words = (sign_mantissa.astype(np.uint16) & 0x80) << 8
    words |= exponents.astype(np.uint16) << 7
    words |= sign_mantissa.astype(np.uint16) & 0x7F
    return words


def decompress(chunk: CompressedChunk) -> np.ndarray:
    """Reconstruct the exact BF16 words a chunk was compressed from.

    Invariants are re-checked first; a malformed chunk raises
    CorruptChunkError naming the offending field.
    """
    chunk.check_structure()
    codes = chunk._unpack_codes()
    chunk._check_consistency(codes)
    exponents = chunk.codebook.decode_table[codes]
    escapes = codes == 0
    exponents[escapes] = chunk.zero_exponents
    return _reassemble(chunk.sign_mantissa, exponents)


def decompress_group(chunk: CompressedChunk, group: int) -> np.ndarray:
    """Decode one group of the chunk without touching earlier escape data.

    The group index gives the offset of the group's first escape inside
    zero_exponents, which is what makes this random access possible.
    """
    chunk.validate()
    n, gs = chunk.element_count, chunk.group_size
    n_groups = (n + gs - 1) // gs
    if not 0 <= group < n_groups:
        raise IndexError(f"group {group} out of range for {n_groups} groups")
    start = group * gs
    stop = min(start + gs, n)
    codes = chunk._unpack_codes()[start:stop]
    exponents = chunk.codebook.decode_table[codes]
    escapes = codes == 0
    zbase = int(chunk.group_index[group])
    exponents[escapes] = chunk.zero_exponents[zbase:zbase + int(escapes.sum())]
    return _reassemble(chunk.sign_mantissa[start:stop], exponents)


# --- size law -----------------------------------------------------------
#
# Container layout constants live here so the size of the static section is
# computable without a serializer in hand (receivers pre-size transfers from
# the element count alone).

ALIGNMENT = 128
HEADER_FIXED_BYTES = 48   # magic, version, flags, group_size_log2, counts, offsets
CODEBOOK_BYTES = 8        # 7 entries + 1 base byte
HEADER_BYTES = HEADER_FIXED_BYTES + CODEBOOK_BYTES


def _pad(size: int) -> int:
    return (size + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def static_section_sizes(element_count: int, group_size: int = GROUP_SIZE) -> dict:
    """Unpadded byte size of each static section, keyed by name."""
    n = int(element_count)
    if n < 1:
        raise ValueError("element_count must be >= 1")
    return {
        "header": HEADER_FIXED_BYTES,
        "codebook": CODEBOOK_BYTES,
        "sign_mantissa": n,
        "exp_planes": 3 * ((n + 7) // 8),
        "group_index": 4 * ((n + group_size - 1) // group_size),
    }


def static_size_bytes(element_count: int, group_size: int = GROUP_SIZE) -> int:
    """Serialized size of the static section, with every section 128-byte aligned.

    Pure function of the element count and group size; asymptotically
    8 + 3/8 bytes per element, i.e. 11 bits per value.
    """
    n = int(element_count)
    if n < 1:
        raise ValueError("element_count must be >= 1")
    return (
        _pad(HEADER_BYTES)
        + _pad(n)
        + 3 * _pad((n + 7) // 8)
        + _pad(4 * ((n + group_size - 1) // group_size))
    )


def compressed_size_bytes(element_count: int, zero_count: int,
                          group_size: int = GROUP_SIZE) -> int:
    """Total serialized frame size: static law plus the padded escape list."""
    return static_size_bytes(element_count, group_size) + _pad(int(zero_count))
