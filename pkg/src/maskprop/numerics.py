"""Small numerical helpers used by several modules.

Everything here computes in float64 regardless of the input dtype; storage
formats downcast on write instead.
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Scale every row of a 2-D matrix to unit Euclidean norm.

    Zero rows cannot be normalized; the error names the first offending row.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"normalize_rows expects a 2-D matrix, got ndim={m.ndim}")
    norms = np.linalg.norm(m, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(f"cannot normalize zero row at index {int(zero[0])}")
    return m / norms[:, None]


def unit_vector(v: np.ndarray, what: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValidationError(f"cannot normalize zero-norm {what}")
    return v / n


def check_unit_rows(matrix: np.ndarray, tol: float, what: str) -> None:
    norms = np.linalg.norm(np.asarray(matrix, dtype=np.float64), axis=-1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValidationError(
            f"{what} row {int(bad[0])} has norm {norms[bad[0]]:.8f}, expected 1 +/- {tol:g}"
        )


def check_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{what} contains non-finite values")


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Layer normalization over the last axis with learned gain and bias."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * np.asarray(gain, dtype=np.float64) + np.asarray(
        bias, dtype=np.float64
    )


def quick_gelu(x: np.ndarray) -> np.ndarray:
    """Sigmoid-approximated GELU, the activation used by CLIP-style encoders."""
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + np.exp(-1.702 * x))
