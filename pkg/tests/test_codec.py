"""Compression round-trips, plane packing, group index, and the size law."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gaussian_words
from zipcoll import bf16
from zipcoll.codec import (
    GROUP_SIZE,
    CompressedChunk,
    ExponentCodebook,
    compress,
    decompress,
    decompress_group,
    derive_codebook,
    static_section_sizes,
    static_size_bytes,
)
from zipcoll.errors import CorruptChunkError

BOOK_127 = ExponentCodebook((124, 125, 126, 127, 128, 129, 130))
BOOK_MISS = ExponentCodebook((10, 11, 12, 13, 14, 15, 16))   # misses ~everything

words_arrays = st.lists(
    st.integers(0, 0xFFFF), min_size=1, max_size=600).map(
        lambda xs: np.array(xs, dtype=np.uint16))

books = st.sets(st.integers(0, 255), min_size=7, max_size=7).map(
    lambda s: ExponentCodebook(tuple(sorted(s))))


class TestScalarReference:
    """One element worked out by hand: 1.0 is 0x3F80 = sign 0, exp 127, mantissa 0."""

    def test_eight_ones(self):
        data = np.full(8, 0x3F80, dtype=np.uint16)
        chunk = compress(data, BOOK_127)
        assert chunk.zero_count == 0
        assert bytes(chunk.sign_mantissa) == b"\x00" * 8
        # exponent 127 sits at entry index 3, so every code is 4 = 0b100:
        # plane0/plane1 all zero, plane2 all ones for 8 elements
        assert bytes(chunk.exp_planes[0]) == b"\x00"
        assert bytes(chunk.exp_planes[1]) == b"\x00"
        assert bytes(chunk.exp_planes[2]) == b"\xff"

    def test_minus_two(self):
        # -2.0 = 0xC000: sign 1, exp 128, mantissa 0; code = index(128)+1 = 5
        chunk = compress(np.array([0xC000], dtype=np.uint16), BOOK_127)
        assert chunk.sign_mantissa[0] == 0x80
        assert (int(chunk.exp_planes[0][0]) & 1,
                int(chunk.exp_planes[1][0]) & 1,
                int(chunk.exp_planes[2][0]) & 1) == (1, 0, 1)


class TestEscapePaths:
    def test_no_escapes_when_all_exponents_covered(self):
        data = np.full(100, 0x4049, dtype=np.uint16)   # pi-ish, exponent 128
        chunk = compress(data, BOOK_127)
        assert chunk.zero_count == 0
        assert chunk.zero_exponents.size == 0

    def test_all_escapes_reproduce_exponents_in_order(self):
        data = gaussian_words(1000, seed=6)
        chunk = compress(data, BOOK_MISS)
        assert chunk.zero_count == data.size
        assert np.array_equal(chunk.zero_exponents, bf16.exponent_bits(data))

    def test_round_trip_all_escapes(self):
        data = gaussian_words(1000, seed=7)
        assert np.array_equal(decompress(compress(data, BOOK_MISS)), data)


class TestRoundTrip:
    @given(data=words_arrays, book=books)
    @settings(max_examples=200, deadline=None)
    def test_bit_exact(self, data, book):
        assert np.array_equal(decompress(compress(data, book)), data)

    @pytest.mark.parametrize("pattern,name", [
        (0x7FC0, "all-NaN"),
        (0x0001, "all-subnormal"),
        (0x0000, "all-zero"),
        (0xFF80, "all-neg-inf"),
    ])
    def test_special_buffers(self, pattern, name):
        data = np.full(777, pattern, dtype=np.uint16)
        for book in (BOOK_127, BOOK_MISS):
            assert np.array_equal(decompress(compress(data, book)), data), name

    def test_single_element(self):
        for word in (0x0000, 0x7FC5, 0x3F80, 0xFFFF):
            data = np.array([word], dtype=np.uint16)
            assert np.array_equal(decompress(compress(data, BOOK_127)), data)

    def test_nan_payloads_with_full_escape(self):
        rng = np.random.default_rng(8)
        data = (0x7F80 | rng.integers(1, 0x80, 500)).astype(np.uint16)
        data |= (rng.integers(0, 2, 500).astype(np.uint16) << 15)
        chunk = compress(data, BOOK_127)
        assert chunk.zero_count == 500
        assert np.array_equal(decompress(chunk), data)


class TestDeterminism:
    def test_identical_inputs_identical_chunks(self):
        data = gaussian_words(10000, seed=11)
        a = compress(data, BOOK_127)
        b = compress(data, BOOK_127)
        assert a.element_count == b.element_count
        assert np.array_equal(a.sign_mantissa, b.sign_mantissa)
        assert all(np.array_equal(x, y)
                   for x, y in zip(a.exp_planes, b.exp_planes))
        assert np.array_equal(a.group_index, b.group_index)
        assert np.array_equal(a.zero_exponents, b.zero_exponents)


class TestGroupIndex:
    @pytest.mark.parametrize("n", [1, 7, 512, 513, 1024, 5000])
    def test_exclusive_prefix_invariants(self, n):
        data = gaussian_words(n, seed=n)
        chunk = compress(data, derive_codebook(1.0))
        gi = chunk.group_index.astype(np.int64)
        assert gi.size == (n + GROUP_SIZE - 1) // GROUP_SIZE
        assert gi[0] == 0
        assert np.all(np.diff(gi) >= 0)
        escapes = bf16.exponent_bits(data)
        in_book = np.isin(escapes, chunk.codebook.entries)
        per_group = np.add.reduceat(
            (~in_book).astype(np.int64), np.arange(0, n, GROUP_SIZE))
        assert gi[-1] + per_group[-1] == chunk.zero_count

    def test_custom_group_size_recorded(self):
        data = gaussian_words(300, seed=3)
        chunk = compress(data, BOOK_127, group_size=64)
        assert chunk.group_size == 64
        assert chunk.group_index.size == (300 + 63) // 64

    def test_non_power_of_two_group_rejected(self):
        with pytest.raises(ValueError):
            compress(gaussian_words(10), BOOK_127, group_size=100)

    @pytest.mark.parametrize("n,gs", [(2000, 512), (2049, 512), (130, 64)])
    def test_random_access_matches_full_decode(self, n, gs):
        data = gaussian_words(n, seed=n + 1)
        chunk = compress(data, derive_codebook(1.0), group_size=gs)
        full = decompress(chunk)
        for g in range((n + gs - 1) // gs):
            got = decompress_group(chunk, g)
            assert np.array_equal(got, full[g * gs:(g + 1) * gs])

    def test_group_out_of_range(self):
        chunk = compress(gaussian_words(100), BOOK_127)
        with pytest.raises(IndexError):
            decompress_group(chunk, 1)


class TestValidation:
    def make_chunk(self):
        return compress(gaussian_words(2000, seed=42), derive_codebook(1.0))

    def test_empty_buffer_rejected(self):
        with pytest.raises(ValueError):
            compress(np.empty(0, dtype=np.uint16), BOOK_127)

    def test_zero_count_mismatch_detected(self):
        c = self.make_chunk()
        bad = CompressedChunk(
            c.element_count, c.group_size, c.codebook, c.sign_mantissa,
            c.exp_planes, c.group_index, c.zero_exponents[:-1])
        with pytest.raises(CorruptChunkError, match="zero_count"):
            decompress(bad)

    def test_truncated_plane_detected(self):
        c = self.make_chunk()
        planes = (c.exp_planes[0][:-1], c.exp_planes[1], c.exp_planes[2])
        bad = CompressedChunk(
            c.element_count, c.group_size, c.codebook, c.sign_mantissa,
            planes, c.group_index, c.zero_exponents)
        with pytest.raises(CorruptChunkError, match="exp_planes"):
            decompress(bad)

    def test_corrupt_group_index_detected(self):
        c = self.make_chunk()
        gi = c.group_index.copy()
        gi[1] += 1
        bad = CompressedChunk(
            c.element_count, c.group_size, c.codebook, c.sign_mantissa,
            c.exp_planes, gi, c.zero_exponents)
        with pytest.raises(CorruptChunkError, match="group_index"):
            decompress(bad)


class TestSizeLaw:
    def test_formula_for_eight_elements(self):
        sizes = static_section_sizes(8, 512)
        assert sizes == {
            "header": 48,
            "codebook": 8,
            "sign_mantissa": 8,
            "exp_planes": 3,
            "group_index": 4,
        }

    def test_eleven_bits_asymptotically(self):
        n = 1 << 20
        bits = static_size_bytes(n) * 8 / n
        assert 11.0 <= bits <= 11.2

    def test_pure_function_of_count(self):
        assert static_size_bytes(1000) == static_size_bytes(1000)
        with pytest.raises(ValueError):
            static_size_bytes(0)

    def test_monotone_in_count(self):
        sizes = [static_size_bytes(n) for n in (1, 100, 1000, 10**6)]
        assert sizes == sorted(sizes)
