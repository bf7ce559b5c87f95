"""Tensor-kernel contracts: exact accumulation order, reference values,
and reproducible randomness."""

import numpy as np
import pytest

from sidetune import kernels

# gelu tanh-approximation references, evaluated with 50-digit mpmath
GELU_REFERENCE = {
    1.0: 0.8411919906082767,
    0.5: 0.34571400982514394,
    -1.0: -0.1588080093917233,
    2.0: 1.954597694087775,
    -0.25: -0.100324649298315,
}


def triple_loop_matmul(a, b):
    """Brute-force oracle with explicit scalar accumulation."""
    n, k = a.shape
    _, p = b.shape
    out = np.zeros((n, p), dtype=a.dtype)
    for i in range(n):
        for j in range(p):
            acc = a.dtype.type(0)
            for kk in range(k):
                acc = a.dtype.type(acc + a.dtype.type(a[i, kk] * b[kk, j]))
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2, dtype=np.float32)
        b = np.array([[3, 4], [5, 6]], dtype=np.float32)
        np.testing.assert_array_equal(kernels.matmul(eye, b), b)

    def test_dot_product(self):
        a = np.array([[1.0, 2.0]], dtype=np.float32)
        b = np.array([[3.0], [4.0]], dtype=np.float32)
        np.testing.assert_array_equal(kernels.matmul(a, b), [[11.0]])

    def test_matches_triple_loop_exactly(self):
        rng = kernels.make_rng(42)
        a = rng.normal(size=(4, 5)).astype(np.float32)
        b = rng.normal(size=(5, 3)).astype(np.float32)
        np.testing.assert_array_equal(kernels.matmul(a, b), triple_loop_matmul(a, b))

    def test_identity_bit_exact_for_any_a(self):
        rng = kernels.make_rng(1)
        for _ in range(5):
            a = rng.normal(size=(6, 6)).astype(np.float32) * 100
            np.testing.assert_array_equal(
                kernels.matmul(np.eye(6, dtype=np.float32), a), a
            )

    def test_batch_dims_on_lhs(self):
        rng = kernels.make_rng(2)
        a = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        b = rng.normal(size=(5, 2)).astype(np.float32)
        out = kernels.matmul(a, b)
        assert out.shape == (2, 3, 4, 2)
        np.testing.assert_array_equal(out[1, 2], triple_loop_matmul(a[1, 2], b))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kernels.matmul(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32))

    def test_mixed_precision_rejected(self):
        with pytest.raises(ValueError):
            kernels.matmul(np.zeros((2, 2), np.float32), np.zeros((2, 2), np.float64))

    def test_batched_matmul_matches_per_slice(self):
        rng = kernels.make_rng(3)
        a = rng.normal(size=(2, 3, 4)).astype(np.float32)
        b = rng.normal(size=(2, 4, 5)).astype(np.float32)
        out = kernels.batched_matmul(a, b)
        for i in range(2):
            np.testing.assert_array_equal(out[i], triple_loop_matmul(a[i], b[i]))


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = np.full((3, 8), 2.5, dtype=np.float32)
        out = kernels.layer_norm(x, np.ones(8, np.float32), np.zeros(8, np.float32))
        np.testing.assert_array_equal(out, np.zeros_like(x))

    def test_symmetric_two_point_row(self):
        x = np.array([[1.0, 3.0]], dtype=np.float64)
        out = kernels.layer_norm(x, np.ones(2), np.zeros(2), eps=0.0)
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-12)

    def test_against_two_pass_oracle(self):
        rng = kernels.make_rng(7)
        x = rng.normal(size=(5, 16)).astype(np.float32)
        gamma = rng.normal(size=16).astype(np.float32)
        beta = rng.normal(size=16).astype(np.float32)
        # independent double-precision two-pass reference
        x64 = x.astype(np.float64)
        mu = x64.sum(axis=1, keepdims=True) / 16
        var = ((x64 - mu) ** 2).sum(axis=1, keepdims=True) / 16
        ref = gamma * (x64 - mu) / np.sqrt(var + 1e-5) + beta
        out = kernels.layer_norm(x, gamma, beta, eps=1e-5)
        assert np.abs(out - ref).max() < 1e-6

    def test_output_statistics(self):
        rng = kernels.make_rng(8)
        x = rng.normal(size=(20, 32)).astype(np.float32) * 3 + 1
        out = kernels.layer_norm(x, np.ones(32, np.float32), np.zeros(32, np.float32))
        means = out.astype(np.float64).mean(axis=1)
        variances = out.astype(np.float64).var(axis=1)
        assert np.abs(means).max() < 1e-6
        assert np.abs(variances - 1).max() < 1e-4

    def test_affine_shape_mismatch(self):
        with pytest.raises(ValueError):
            kernels.layer_norm(np.zeros((2, 4), np.float32),
                               np.ones(3, np.float32), np.zeros(3, np.float32))


class TestNonlinearities:
    def test_relu(self):
        np.testing.assert_array_equal(
            kernels.nonlinearity(np.array([-1.0, 0.0, 2.0]), "relu"), [0.0, 0.0, 2.0]
        )

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(
            kernels.nonlinearity(np.array([0.0, 0.0]), "softmax_rows"), [0.5, 0.5]
        )

    def test_softmax_rows_sum_to_one(self):
        rng = kernels.make_rng(9)
        x = rng.normal(size=(4, 7, 11)).astype(np.float32) * 10
        out = kernels.nonlinearity(x, "softmax_rows")
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("x,expected", sorted(GELU_REFERENCE.items()))
    def test_gelu_reference_values(self, x, expected):
        out = kernels.nonlinearity(np.array([x], dtype=np.float64), "gelu")
        assert abs(float(out[0]) - expected) < 1e-12

    def test_gelu_grad_matches_finite_differences(self):
        x = np.linspace(-3, 3, 13)
        g = kernels.nonlinearity_grad(x, "gelu")
        h = 1e-7
        num = (kernels.gelu(x + h) - kernels.gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(g, num, atol=1e-6)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            kernels.nonlinearity(np.zeros(3), "swish")


class TestMeanPool:
    def test_single_position_is_identity(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 1, 3)
        np.testing.assert_array_equal(kernels.mean_pool(x), x[:, 0, :])

    def test_midpoint(self):
        x = np.array([[[1, 1, 1], [3, 3, 3]]], dtype=np.float32)
        np.testing.assert_array_equal(kernels.mean_pool(x), [[2, 2, 2]])

    def test_matches_naive_loop_exactly(self):
        rng = kernels.make_rng(10)
        x = rng.normal(size=(3, 9, 5)).astype(np.float32)
        ref = np.zeros((3, 5), dtype=np.float32)
        for b in range(3):
            for h in range(5):
                acc = np.float32(0)
                for s in range(9):
                    acc = np.float32(acc + x[b, s, h])
                ref[b, h] = np.float32(acc / np.float32(9))
        np.testing.assert_array_equal(kernels.mean_pool(x), ref)

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            kernels.mean_pool(np.zeros((2, 0, 3), np.float32))

    def test_rank_check(self):
        with pytest.raises(ValueError):
            kernels.mean_pool(np.zeros((2, 3), np.float32))


class TestF16Roundtrip:
    def test_exactly_representable(self):
        assert kernels.f16_roundtrip(np.array([1.0]))[0] == 1.0

    def test_tenth(self):
        # bit-level binary16 value of 0.1
        assert kernels.f16_roundtrip(np.array([0.1], np.float32))[0] == np.float32(0.0999755859375)

    def test_saturates_at_max_finite(self):
        out = kernels.f16_roundtrip(np.array([70000.0, -70000.0], np.float32))
        np.testing.assert_array_equal(out, [65504.0, -65504.0])

    def test_idempotent(self):
        rng = kernels.make_rng(11)
        x = rng.normal(size=1000).astype(np.float32) * rng.choice([1, 1e4, 1e-4], 1000)
        once = kernels.f16_roundtrip(x)
        np.testing.assert_array_equal(kernels.f16_roundtrip(once), once)

    def test_preserves_dtype(self):
        assert kernels.f16_roundtrip(np.zeros(3, np.float64)).dtype == np.float64


class TestFiniteDiff:
    def test_quadratic(self):
        grad = kernels.finite_diff_grad(lambda t: float(t[0] ** 2),
                                        np.array([3.0]), 1e-6)
        assert abs(grad[0] - 6.0) < 1e-6

    def test_constant(self):
        grad = kernels.finite_diff_grad(lambda t: 1.25, np.ones(4), 1e-6)
        np.testing.assert_array_equal(grad, np.zeros(4))

    def test_rejects_single_precision(self):
        with pytest.raises(TypeError):
            kernels.finite_diff_grad(lambda t: 0.0, np.ones(2, np.float32))

    def test_does_not_mutate_input(self):
        theta = np.array([1.0, 2.0])
        before = theta.copy()
        kernels.finite_diff_grad(lambda t: float((t ** 3).sum()), theta)
        np.testing.assert_array_equal(theta, before)


class TestRng:
    def test_equal_seeds_equal_streams(self):
        a = kernels.make_rng(123).normal(size=10_000)
        b = kernels.make_rng(123).normal(size=10_000)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = kernels.make_rng(1).normal(size=100)
        b = kernels.make_rng(2).normal(size=100)
        assert not np.array_equal(a, b)
