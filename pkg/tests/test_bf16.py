"""Bit-level BF16 conversion checks, including rounding ties and specials."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zipcoll import bf16


ALL_WORDS = np.arange(65536, dtype=np.uint32).astype(np.uint16)


def test_widening_is_exact_for_all_patterns():
    f32 = bf16.to_float32(ALL_WORDS)
    assert f32.dtype == np.float32
    # widening just shifts bits, so the top halves must match exactly
    assert np.array_equal(f32.view(np.uint32) >> 16, ALL_WORDS.astype(np.uint32))


def test_round_trip_for_non_nan_patterns():
    f32 = bf16.to_float32(ALL_WORDS)
    finite_or_inf = ~np.isnan(f32)
    back = bf16.from_float32(f32[finite_or_inf])
    assert np.array_equal(back, ALL_WORDS[finite_or_inf])


def test_nan_stays_nan():
    nan_words = ALL_WORDS[np.isnan(bf16.to_float32(ALL_WORDS))]
    back = bf16.from_float32(bf16.to_float32(nan_words))
    assert np.all(np.isnan(bf16.to_float32(back)))
    # sign is preserved
    assert np.array_equal(back >> 15, nan_words >> 15)


@pytest.mark.parametrize("value,expected", [
    (1.0, 0x3F80),
    (-1.0, 0xBF80),
    (2.0, 0x4000),
    (1.0 + 2.0**-8, 0x3F80),       # tie, rounds to even (down)
    (1.0 + 3 * 2.0**-8, 0x3F82),   # tie, rounds to even (up)
    (1.0 + 2.0**-7, 0x3F81),       # exactly representable
    (2.0**-130, 0x0008),           # subnormal
    (1e39, 0x7F80),                # overflow to +inf
    (-1e39, 0xFF80),
    (3.4e38, 0x7F80),              # above max finite BF16, below max float32
    (0.0, 0x0000),
    (-0.0, 0x8000),
])
def test_round_to_nearest_even_from_f64(value, expected):
    assert int(bf16.from_float64(np.array([value]))[0]) == expected


@given(st.lists(st.floats(allow_nan=False, width=32), min_size=1, max_size=64))
def test_f64_rounding_monotone_and_idempotent(values):
    words = bf16.from_float64(np.array(values, dtype=np.float64))
    # re-rounding an exact BF16 value changes nothing
    again = bf16.from_float64(bf16.to_float64(words))
    assert np.array_equal(words, again)


def test_sign_exponent_mantissa_fields():
    word = np.array([0xBF93], dtype=np.uint16)  # sign 1, exp 0x7F, mantissa 0x13
    assert bf16.sign_bits(word)[0] == 1
    assert bf16.exponent_bits(word)[0] == 0x7F
    assert bf16.mantissa_bits(word)[0] == 0x13
