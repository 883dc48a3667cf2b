"""Dense float64 kernels with a fixed reduction order, plus a finite-difference oracle.

Matrices are plain 2-D ``np.float64`` arrays.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class OracleError(ArithmeticError):
    pass


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated over the inner index strictly left to right.

    BLAS may reassociate sums; this keeps every output element's summation
    order fixed so results are reproducible bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


def softmax_rows(m: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    ``mask`` (same shape, bool) keeps only True entries; masked-out entries get
    weight exactly 0. Every row must keep at least one entry.
    """
    m = np.asarray(m, dtype=np.float64)
    if mask is None:
        shifted = m - m.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        if mask.shape != m.shape:
            raise ShapeError(f"mask {mask.shape} does not match scores {m.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("softmax row with every entry masked")
        row_max = np.where(mask, m, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, m - row_max, 0.0)), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def swish_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        hi = float(f(x))
        x[idx] = orig - eps
        lo = float(f(x))
        x[idx] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleError(f"non-finite function value at entry {idx}")
        grad[idx] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"{analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
