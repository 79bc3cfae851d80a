"""BF16 bit-pattern helpers.

A BF16 word is a 16-bit pattern: sign(1) | biased exponent(8) | mantissa(7).
Buffers are handled as numpy uint16 arrays so that every one of the 65536
patterns (NaN payloads, infinities, subnormals, signed zeros) survives
untouched.  Conversion to and from floats only happens where values, not
bits, are needed (statistics, reductions, data generation).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateDataError

EXP_BITS = 8
MANT_BITS = 7
EXP_MASK = 0xFF
MANT_MASK = 0x7F
EXP_BIAS = 127

# Quiet bit of the 7-bit mantissa; forced during rounding so a NaN can never
# collapse into an infinity.
QUIET_BIT = 0x40


def as_words(data) -> np.ndarray:
    """Return a contiguous uint16 view/copy of a BF16 buffer."""
    arr = np.ascontiguousarray(data)
    if arr.dtype != np.uint16:
        arr = arr.astype(np.uint16)
    return arr.ravel()


def sign_bits(words: np.ndarray) -> np.ndarray:
    return ((words >> 15) & 0x1).astype(np.uint8)


def exponent_bits(words: np.ndarray) -> np.ndarray:
    """Biased 8-bit exponent field of each word."""
    return ((words >> MANT_BITS) & EXP_MASK).astype(np.uint8)


def mantissa_bits(words: np.ndarray) -> np.ndarray:
    return (words & MANT_MASK).astype(np.uint8)


def to_float32(words: np.ndarray) -> np.ndarray:
    """Exact widening: a BF16 word is the top half of the equal-valued float32."""
    return (as_words(words).astype(np.uint32) << 16).view(np.float32)


def from_float32(values: np.ndarray) -> np.ndarray:
    """Round float32 values to BF16 words (round-to-nearest-even).

    NaNs keep their sign and top payload bits; the quiet bit is forced so a
    NaN can never collapse into an infinity.
    """
    f32 = np.ascontiguousarray(values, dtype=np.float32)
    u32 = f32.view(np.uint32)
    nan = np.isnan(f32)
    lsb = (u32 >> 16) & 1
    rounded = ((u32 + 0x7FFF + lsb) >> 16).astype(np.uint16)
    if nan.any():
        rounded = np.where(nan, ((u32 >> 16).astype(np.uint16) | QUIET_BIT), rounded)
    return rounded


def from_float64(values: np.ndarray) -> np.ndarray:
    """Round float64 samples to BF16 words.

    Goes through float32 first; with 24 significand bits between 53 and 8
    the double rounding is exact (q >= 2r + 2), so the result equals direct
    round-to-nearest-even from float64.  Values beyond the BF16 range
    overflow to infinity by design.
    """
    with np.errstate(over="ignore"):
        f32 = np.asarray(values, dtype=np.float64).astype(np.float32)
    return from_float32(f32)


def to_float64(words: np.ndarray) -> np.ndarray:
    # signaling-NaN payloads are legal BF16 words; the cast must not warn
    with np.errstate(invalid="ignore"):
        return to_float32(words).astype(np.float64)


def measure_sigma(data) -> float:
    """Population standard deviation of the finite elements of a BF16 buffer.

    Non-finite elements (NaN, +/-Inf) are excluded.  Raises
    DegenerateDataError for an empty buffer or one with no finite element.
    A zero return (constant data) is valid; callers that need a codebook
    must fall back, see codec.codebook_for.
    """
    words = as_words(data)
    if words.size == 0:
        raise DegenerateDataError("measure_sigma: empty buffer")
    values = to_float64(words)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise DegenerateDataError("measure_sigma: no finite elements")
    return float(np.std(finite))
