"""Dense kernel helpers shared by every other module.

Matrices are plain 2-D ``numpy.ndarray``s in row-major order, vectors are
1-D arrays; float64 is the reference precision for all equivalence tests
and float32 the benchmark precision. All functions here are pure and run
serially, so repeated calls on identical inputs are bitwise reproducible.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import EmptyInputError, OracleFailureError, ShapeError

Matrix = np.ndarray
Vector = np.ndarray

SINGLE = np.float32
DOUBLE = np.float64


def as_matrix(a, dtype=DOUBLE) -> Matrix:
    """Coerce to a 2-D array of the given precision."""
    m = np.asarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected 2-D matrix, got ndim={m.ndim}")
    return m


def as_vector(a, dtype=DOUBLE) -> Vector:
    m = np.asarray(a, dtype=dtype)
    if m.ndim != 1:
        raise ShapeError(f"expected 1-D vector, got ndim={m.ndim}")
    return m


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed, serially reproducible accumulation order."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with max-subtraction so huge logits cannot overflow."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D matrix")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_vec(v: Vector) -> Vector:
    """Softmax of a single logit vector (max-subtracted)."""
    v = np.asarray(v)
    e = np.exp(v - v.max())
    return e / e.sum()


def pairwise_rowsum(rows: Matrix) -> Vector:
    """Sum rows by repeatedly folding adjacent pairs.

    The fold tree is fixed, so two call sites summing the same rows get
    bitwise-identical results, and summing 2**j copies of one row is exact.
    """
    rows = np.asarray(rows)
    if rows.shape[0] == 0:
        raise EmptyInputError("cannot sum zero rows")
    while rows.shape[0] > 1:
        n = rows.shape[0]
        half = n // 2
        folded = rows[0 : 2 * half : 2] + rows[1 : 2 * half : 2]
        if n % 2:
            folded = np.concatenate([folded, rows[2 * half :]], axis=0)
        rows = folded
    return rows[0]


def pairwise_sum_mid(stack: np.ndarray) -> Matrix:
    """Adjacent-pair fold over axis 1 of a (groups, n, dim) stack.

    Uses the same fold tree as :func:`pairwise_rowsum` so batched chunk
    pooling matches the one-chunk-at-a-time path bitwise.
    """
    while stack.shape[1] > 1:
        n = stack.shape[1]
        half = n // 2
        folded = stack[:, 0 : 2 * half : 2] + stack[:, 1 : 2 * half : 2]
        if n % 2:
            folded = np.concatenate([folded, stack[:, 2 * half :]], axis=1)
        stack = folded
    return stack[:, 0]


def mean_pool(rows: Matrix) -> Vector:
    """Column-wise mean of a non-empty row block.

    Exact for 2**j identical rows thanks to the pairwise fold.
    """
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ShapeError("mean_pool expects a 2-D matrix")
    if rows.shape[0] == 0:
        raise EmptyInputError("mean_pool of an empty chunk")
    return pairwise_rowsum(rows) / rows.shape[0]


def finite_diff_grad(
    f: Callable[[Vector], float], x: Vector, eps: float = 1e-5
) -> Vector:
    """Central-difference gradient of a scalar function, one probe per coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=DOUBLE)
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        hi = f(x + step)
        lo = f(x - step)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleFailureError(f"non-finite probe at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad
