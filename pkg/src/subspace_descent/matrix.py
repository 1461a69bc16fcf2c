"""Dense real-matrix helpers.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64. The helpers here
add the two things numpy does not give for free: strict shape agreement (no
broadcasting) and a finiteness check on every result.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting other ranks."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_finite(a: np.ndarray, what: str = "result") -> np.ndarray:
    """Raise NonFiniteError unless every entry is finite; returns ``a``."""
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a


def _quiet():
    # Overflow shows up as inf, which check_finite turns into an error.
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def frobenius_inner(a, b) -> float:
    """trace(a^T b), i.e. the sum of elementwise products."""
    a = as_matrix(a)
    b = as_matrix(b)
    _same_shape(a, b, "frobenius_inner")
    return float(np.vdot(a, b))


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.vdot(a, a)))


def hadamard(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    _same_shape(a, b, "hadamard")
    with _quiet():
        out = a * b
    return check_finite(out)


def hadamard_square(a) -> np.ndarray:
    a = as_matrix(a)
    with _quiet():
        out = a * a
    return check_finite(out)


def elementwise_sqrt(a) -> np.ndarray:
    a = as_matrix(a)
    if np.any(a < 0):
        raise ValueError("elementwise_sqrt: negative entry")
    return np.sqrt(a)


def elementwise_div_shifted(a, b, e: float) -> np.ndarray:
    """a / (sqrt(b) + e), the Adam normaliser."""
    if not e > 0:
        raise ValueError("shift e must be positive")
    a = as_matrix(a)
    b = as_matrix(b)
    _same_shape(a, b, "elementwise_div_shifted")
    with _quiet():
        out = a / (elementwise_sqrt(b) + e)
    return check_finite(out)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} not conformable")
    with _quiet():
        out = a @ b
    return check_finite(out)


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def axpy(alpha: float, x, y) -> np.ndarray:
    """alpha * x + y."""
    x = as_matrix(x)
    y = as_matrix(y)
    _same_shape(x, y, "axpy")
    with _quiet():
        out = alpha * x + y
    return check_finite(out)


def scale(alpha: float, x) -> np.ndarray:
    with _quiet():
        out = alpha * as_matrix(x)
    return check_finite(out)


def sign(a) -> np.ndarray:
    # np.sign maps 0 -> 0, which is the subgradient choice we want for |x|.
    return np.sign(as_matrix(a))


def identity(n: int) -> np.ndarray:
    return np.eye(n)
