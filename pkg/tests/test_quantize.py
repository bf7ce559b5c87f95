"""Quantizer contracts: golden codebook, round-trip bounds, brute-force
nearest-entry agreement, packing, and payload arithmetic."""

import numpy as np
import pytest

from sidetune import kernels
from sidetune.quantize import (
    QuantizedActivation,
    SCHEMES,
    dequantize,
    nf4_codebook,
    pack_nibbles,
    payload_bytes,
    quantize,
    unpack_nibbles,
)

# Normal-quantile codebook computed once with a 50-digit mpmath script
# (erfinv-based inverse CDF, offset 1 - (1/30 + 1/32)/2), frozen here.
NF4_GOLDEN = np.array([
    -1.0,
    -0.6961928056323434,
    -0.5250729594465009,
    -0.3949174259199073,
    -0.28444130892108227,
    -0.18477340280045576,
    -0.09104997598578049,
    0.0,
    0.07958031495840913,
    0.16093014438029082,
    0.24611225134745957,
    0.337915136713128,
    0.44070973186421647,
    0.5626168879699852,
    0.7229566441594738,
    1.0,
])


def random_activations(seed, shape=(2, 3, 8), scale=1.0):
    rng = kernels.make_rng(seed)
    return (rng.normal(size=shape) * scale).astype(np.float32)


class TestCodebook:
    def test_entry_count(self):
        assert len(nf4_codebook()) == 16

    def test_normalized_extremes_and_zero(self):
        table = nf4_codebook()
        assert table[0] == -1.0
        assert table[-1] == 1.0
        assert 0.0 in table

    def test_sorted_ascending(self):
        table = nf4_codebook()
        assert np.all(np.diff(table) > 0)

    def test_matches_golden_table(self):
        np.testing.assert_allclose(nf4_codebook(), NF4_GOLDEN, rtol=0, atol=2e-7)


class TestQuantize:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_all_zero_input(self, scheme):
        x = np.zeros((1, 2, 4), dtype=np.float32)
        q = quantize(x, scheme)
        assert q.scale == 1.0
        np.testing.assert_array_equal(dequantize(q), x)

    @pytest.mark.parametrize("s", [1.0, 0.3, 100.0])
    def test_fp4_grid_fixed_points(self, s):
        x = (np.array([7.0, -7.0, 3.5, 0.0], dtype=np.float32) * np.float32(s / 7.0))
        q = quantize(x.reshape(1, 1, 4), "fp4_grid")
        deq = dequantize(q).reshape(-1)
        # on-grid values (+/-7, 0 sevenths of the scale) come back exactly
        assert deq[0] == x[0] and deq[1] == x[1] and deq[3] == 0.0

    def test_nf4_matches_brute_force_search(self):
        table = nf4_codebook()
        x = random_activations(0, shape=(10, 10, 10))  # 1000 draws
        q = quantize(x, "nf4")
        codes = unpack_nibbles(q.codes, x.size)
        z = (x.reshape(-1) / np.float32(q.scale))
        for i, value in enumerate(z):
            dist = np.abs(value - table)
            best = int(np.flatnonzero(dist == dist.min())[0])  # tie: smaller index
            assert codes[i] == best, f"element {i}: {value}"

    def test_nan_rejected(self):
        x = np.zeros((1, 1, 2), dtype=np.float32)
        x[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            quantize(x, "nf4")

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            quantize(np.zeros((1, 1, 2), np.float32), "int3")

    def test_rank_check(self):
        with pytest.raises(ValueError):
            quantize(np.zeros((2, 2), np.float32), "nf4")


class TestDequantize:
    def test_nf4_round_trip_bound(self):
        table = nf4_codebook()
        half_gap = np.diff(table).max() / 2
        x = random_activations(1)
        q = quantize(x, "nf4")
        err = np.abs(dequantize(q) - x).max()
        assert err <= q.scale * half_gap * (1 + 1e-6)

    def test_fp4_round_trip_bound(self):
        x = random_activations(2)
        q = quantize(x, "fp4_grid")
        err = np.abs(dequantize(q) - x).max()
        assert err <= q.scale / 14 * (1 + 1e-6)

    def test_fp8_round_trip_bound(self):
        # e4m3: 3 mantissa bits -> rel err <= 2^-4 for normals, absolute
        # 2^-10 at the subnormal floor (in normalized units)
        x = random_activations(3)
        q = quantize(x, "fp8_e4m3")
        err = np.abs(dequantize(q) - x)
        bound = np.maximum(np.abs(x) / 16, q.scale * 2.0 ** -10)
        assert np.all(err <= bound * (1 + 1e-6))

    def test_fp16_round_trip_is_half_precision(self):
        x = random_activations(4, scale=3.0)
        q = quantize(x, "none_fp16")
        np.testing.assert_array_equal(dequantize(q), kernels.f16_roundtrip(x))

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_code_level_idempotence(self, scheme):
        x = random_activations(5)
        q = quantize(x, scheme)
        once = dequantize(q)
        twice = dequantize(quantize(once, scheme))
        np.testing.assert_array_equal(twice, once)

    def test_code_length_validation(self):
        q = QuantizedActivation(scheme="nf4", shape=(1, 2, 3), scale=1.0, codes=b"\x00")
        with pytest.raises(ValueError):
            dequantize(q)


class TestProperties:
    def test_fp4_monotone_codes(self):
        x = np.sort(random_activations(6).reshape(-1)).reshape(1, 1, -1)
        q = quantize(x, "fp4_grid")
        codes = unpack_nibbles(q.codes, x.size).astype(np.int16)
        assert np.all(np.diff(codes) >= 0)

    @pytest.mark.parametrize("scheme", ["fp4_grid", "nf4"])
    @pytest.mark.parametrize("c", [2.0, 0.5, 7.25])
    def test_codes_invariant_under_positive_scaling(self, scheme, c):
        x = random_activations(7)
        assert quantize(x, scheme).codes == quantize(x * np.float32(c), scheme).codes

    def test_codebook_points_reproduce_indices(self):
        table = nf4_codebook()
        for scale in (1.0, 3.5):
            x = (table * np.float32(scale)).reshape(1, 1, 16)
            codes = unpack_nibbles(quantize(x, "nf4").codes, 16)
            np.testing.assert_array_equal(codes, np.arange(16))

    def test_pack_unpack_exhaustive_two_bytes(self):
        # every 4-nibble pattern: 16^4 sequences of length 4
        grid = np.indices((16, 16, 16, 16)).reshape(4, -1).T.astype(np.uint8)
        packed_rows = [pack_nibbles(row) for row in grid]
        for row, packed in zip(grid, packed_rows):
            np.testing.assert_array_equal(unpack_nibbles(packed, 4), row)

    def test_pack_odd_count(self):
        codes = np.array([1, 2, 3], dtype=np.uint8)
        np.testing.assert_array_equal(unpack_nibbles(pack_nibbles(codes), 3), codes)

    def test_nibble_layout(self):
        # element 0 in the low nibble, element 1 in the high nibble
        assert pack_nibbles(np.array([0x3, 0xA], dtype=np.uint8)) == b"\xa3"


class TestPayloadBytes:
    def test_fp16_covers_reported_full_precision_size(self):
        per_tap = payload_bytes((16, 256, 1024), "none_fp16")
        total_mib = 24 * per_tap / 2**20
        assert abs(total_mib - 190) / 190 < 0.05

    def test_4bit_covers_reported_quantized_size(self):
        per_tap = payload_bytes((16, 256, 1024), "fp4_grid")
        total_mib = 24 * per_tap / 2**20
        assert abs(total_mib - 49.2) / 49.2 < 0.05

    def test_ratio_fp16_to_4bit(self):
        fp16 = payload_bytes((16, 256, 1024), "none_fp16")
        fp4 = payload_bytes((16, 256, 1024), "fp4_grid")
        assert abs(fp16 / fp4 - 4.0) < 0.01  # packing/header overhead only

    def test_counts_scale_and_header(self):
        # 10 elements at 4 bits -> 5 code bytes, plus 4 scale + 19 header
        assert payload_bytes((1, 2, 5), "nf4") == 5 + 4 + 19
