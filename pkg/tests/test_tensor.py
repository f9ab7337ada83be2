"""Tests for the dense kernel helpers.

Hand-computed oracle values are frozen as literals; the pairwise folds
get exactness checks on power-of-two stacks of identical rows.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridlm.errors import EmptyInputError, OracleFailureError, ShapeError
from hybridlm.tensor import (
    DOUBLE,
    SINGLE,
    as_matrix,
    as_vector,
    check_finite,
    finite_diff_grad,
    matmul,
    mean_pool,
    pairwise_rowsum,
    pairwise_sum_mid,
    softmax_rows,
    softmax_vec,
)


class TestCoercion:
    def test_as_matrix_accepts_lists(self):
        m = as_matrix([[1, 2], [3, 4]])
        assert m.shape == (2, 2)
        assert m.dtype == DOUBLE

    def test_as_matrix_rejects_vector(self):
        with pytest.raises(ShapeError):
            as_matrix([1.0, 2.0])

    def test_as_vector_rejects_matrix(self):
        with pytest.raises(ShapeError):
            as_vector([[1.0], [2.0]])

    def test_single_precision_request(self):
        m = as_matrix([[1.5]], dtype=SINGLE)
        assert m.dtype == SINGLE

    def test_check_finite_flags_nan(self):
        with pytest.raises(ValueError):
            check_finite(np.array([1.0, np.nan]))


class TestMatmul:
    """Products against direct arithmetic."""

    def test_identity_case(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(np.eye(2), b), b)

    def test_row_times_column(self):
        # 1*3 + 2*4 = 11
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert out.shape == (1, 1)
        assert out[0, 0] == 11.0

    def test_zero_matrix(self):
        z = np.zeros((2, 2))
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(z, b), z)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_repeat_calls_bitwise_equal(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((17, 9))
        b = rng.standard_normal((9, 13))
        assert np.array_equal(matmul(a, b), matmul(a, b))


class TestSoftmax:
    def test_uniform_row(self):
        out = softmax_rows(np.zeros((1, 3)))
        assert np.allclose(out, 1.0 / 3.0, atol=1e-15)

    def test_log_ratio_row(self):
        # softmax([ln 1, ln 3]) = [1/4, 3/4]
        out = softmax_rows(np.log(np.array([[1.0, 3.0]])))
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    def test_huge_logit_stays_finite(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        assert out[0, 0] > 0.999999

    def test_monotone_within_row(self):
        out = softmax_rows(np.array([[0.1, 2.0, -3.0]]))
        order = np.argsort(out[0])
        assert list(order) == [2, 0, 1]

    def test_vector_variant_matches_rows(self):
        v = np.array([0.3, -1.2, 2.0])
        assert np.array_equal(softmax_vec(v), softmax_rows(v[None, :])[0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, rows, cols, seed):
        m = np.random.default_rng(seed).standard_normal((rows, cols)) * 10
        sums = softmax_rows(m).sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-6)


class TestPairwiseFolds:
    def test_rowsum_matches_plain_sum(self):
        rng = np.random.default_rng(3)
        rows = rng.standard_normal((7, 5))
        assert np.allclose(pairwise_rowsum(rows), rows.sum(axis=0), atol=1e-12)

    def test_rowsum_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            pairwise_rowsum(np.zeros((0, 4)))

    def test_mid_fold_matches_per_group_rowsum(self):
        rng = np.random.default_rng(4)
        stack = rng.standard_normal((3, 6, 4))
        batched = pairwise_sum_mid(stack.copy())
        for g in range(3):
            assert np.array_equal(batched[g], pairwise_rowsum(stack[g]))

    def test_mean_pool_example(self):
        out = mean_pool(np.array([[1.0, 3.0], [3.0, 5.0]]))
        assert np.array_equal(out, [2.0, 4.0])

    def test_mean_pool_single_row_identity(self):
        row = np.array([[2.5, -1.0]])
        assert np.array_equal(mean_pool(row), row[0])

    def test_mean_pool_antisymmetric(self):
        out = mean_pool(np.array([[1.75], [-1.75]]))
        assert out[0] == 0.0

    def test_mean_pool_rejects_empty(self):
        with pytest.raises(EmptyInputError):
            mean_pool(np.zeros((0, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 5), st.integers(0, 2**31 - 1))
    def test_mean_of_power_of_two_copies_is_exact(self, exponent, seed):
        """2**j copies of one row pool back to the row with no rounding."""
        row = np.random.default_rng(seed).standard_normal(6)
        stacked = np.tile(row, (2**exponent, 1))
        assert np.array_equal(mean_pool(stacked), row)


class TestFiniteDiff:
    def test_square_function(self):
        grad = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]))
        assert abs(grad[0] - 6.0) < 1e-6

    def test_constant_function(self):
        grad = finite_diff_grad(lambda x: 7.0, np.array([1.0, -2.0, 0.5]))
        assert np.array_equal(grad, np.zeros(3))

    def test_sum_function(self):
        grad = finite_diff_grad(lambda x: float(x.sum()), np.zeros(4))
        assert np.allclose(grad, 1.0, atol=1e-9)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, np.zeros(2), eps=0.0)

    def test_non_finite_probe_rejected(self):
        def bad(x):
            return float("nan")

        with pytest.raises(OracleFailureError):
            finite_diff_grad(bad, np.zeros(2))
