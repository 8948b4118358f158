"""Small dense linear-algebra helpers shared across the package.

Everything here works on float64 numpy arrays. Matrix products go through
numpy, which is deterministic for a fixed input and thread count.
"""

import numpy as np


def as_matrix(a, name="array"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a, b):
    """Matrix product ``a @ b`` with shape checking.

    Raises:
        ValueError: if the inner dimensions disagree or inputs are not finite.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_row(v):
    """Numerically stable softmax of a 1-D vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("softmax_row expects a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax_row input contains non-finite entries")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(a):
    """Row-wise stable softmax of a 2-D array."""
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def mse(a, b):
    """Mean of squared element differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a - b) ** 2))
