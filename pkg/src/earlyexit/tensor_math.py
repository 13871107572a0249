"""Dense float32 kernels shared by the model, routers, and calibration.

Everything operates on contiguous row-major float32 numpy arrays. All
accumulation happens in float32; NaN/Inf in a result is a bug in the caller's
inputs, never an accepted steady state.
"""

from __future__ import annotations

import numpy as np

DEFAULT_EPS = 1e-6


class ZeroNormError(ValueError):
    """Raised when cosine similarity is asked about a zero-length vector."""


def as_f32(x) -> np.ndarray:
    """Return `x` as a contiguous float32 array (no copy when already one)."""
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a 2-D [m,k] by a 2-D [k,n], float32 accumulation."""
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def rmsnorm(x: np.ndarray, gain: np.ndarray | None = None, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Root-mean-square normalization over the last axis.

    Each row r becomes r / sqrt(mean(r**2) + eps), optionally multiplied
    elementwise by `gain`. eps keeps zero rows at zero instead of NaN.
    """
    x = as_f32(x)
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    out = x / np.sqrt(ms + np.float32(eps))
    if gain is not None:
        gain = as_f32(gain)
        if gain.shape != (x.shape[-1],):
            raise ValueError(f"gain shape {gain.shape} does not match width {x.shape[-1]}")
        out = out * gain
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, stable for large |x|."""
    x = as_f32(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    """Elementwise x * sigmoid(x)."""
    x = as_f32(x)
    return x * sigmoid(x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax along `axis`; rows of -inf everywhere are not allowed."""
    x = as_f32(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two 1-D vectors, clamped to [-1, 1].

    Raises ZeroNormError when either vector has zero norm; callers decide
    what that means (calibration maps it to similarity 0).
    """
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"expected equal-length 1-D vectors, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity undefined for zero-norm vector")
    # f32 rounding can push the ratio just past +/-1, which would corrupt
    # threshold labels downstream.
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def batched_cosine_similarity(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine similarity of two [n,d] arrays.

    Returns (similarities, zero_norm_mask); rows where either side has zero
    norm get similarity 0.0 and are flagged in the mask.
    """
    a = as_f32(a)
    b = as_f32(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"expected matching [n,d] arrays, got {a.shape} and {b.shape}")
    dots = np.einsum("nd,nd->n", a, b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0.0) | (nb == 0.0)
    denom = np.where(zero, 1.0, na * nb)
    sims = np.clip(dots / denom, -1.0, 1.0).astype(np.float32)
    sims[zero] = 0.0
    return sims, zero
