"""Reference implementations of the fused routing kernels.

Each operation exists in two forms: a single-pass implementation mirroring
the fused kernel's semantics, and a composed pipeline of the primitive ops
that serves as its equivalence oracle. "Fused" here means no [batch, b] or
[batch, d] intermediate is materialized — per row, only a b-length scratch
lives between the norm statistics and the score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_math import DEFAULT_EPS, as_f32, rmsnorm, sigmoid, silu

# Small-batch strategy is the ballot-style sequential walk; beyond this many
# rows the prefix-sum scatter path takes over (the warp-width analog).
SMALL_BATCH_CUTOVER = 32


@dataclass
class Router:
    """Two-layer bottleneck MLP scoring convergence of one checkpoint layer."""

    layer: int
    w_down: np.ndarray  # [b, d]
    w_up: np.ndarray  # [1, b]

    def __post_init__(self):
        self.w_down = as_f32(self.w_down)
        self.w_up = as_f32(self.w_up)
        if self.w_down.ndim != 2:
            raise ValueError(f"w_down must be [b, d], got {self.w_down.shape}")
        if self.w_up.shape != (1, self.w_down.shape[0]):
            raise ValueError(f"w_up must be [1, {self.w_down.shape[0]}], got {self.w_up.shape}")

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_down.shape[1]

    @property
    def param_count(self) -> int:
        return self.w_down.size + self.w_up.size


def _check_width(h: np.ndarray, router: Router) -> np.ndarray:
    h = as_f32(h)
    if h.ndim != 2 or h.shape[1] != router.hidden_dim:
        raise ValueError(f"expected [batch, {router.hidden_dim}] rows, got {h.shape}")
    return h


def route_scores(h: np.ndarray, router: Router, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Composed pipeline: rmsnorm -> down -> SiLU -> up -> sigmoid."""
    h = _check_width(h, router)
    z = rmsnorm(h, None, eps)
    u = silu(z @ router.w_down.T)
    return sigmoid(u @ router.w_up.T)[:, 0]


def fused_layernorm_route(h: np.ndarray, router: Router, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Single-pass per-row scoring: norm statistics inline, b-length scratch only."""
    h = _check_width(h, router)
    n, d = h.shape
    w_down, w_up = router.w_down, router.w_up[0]
    inv_d = np.float32(1.0 / d)
    eps32 = np.float32(eps)
    scores = np.empty(n, dtype=np.float32)
    for i in range(n):
        x = h[i]
        scale = np.float32(1.0) / np.sqrt((x @ x) * inv_d + eps32)
        a = (w_down @ x) * scale  # the b-length scratch
        a *= sigmoid(a)  # SiLU in place
        t = float(w_up @ a)
        if t >= 0.0:
            scores[i] = 1.0 / (1.0 + math.exp(-t))
        else:
            et = math.exp(t)
            scores[i] = et / (1.0 + et)
    return scores


@dataclass
class CompactionResult:
    """Stable partition of a batch into continuing and exiting rows."""

    continuing: np.ndarray  # [n_cont, d]
    exiting: np.ndarray  # [n_exit, d]
    continuing_indices: np.ndarray  # int64, into original batch order
    exiting_indices: np.ndarray


def _as_mask(exit_mask, batch: int) -> np.ndarray:
    mask = np.asarray(exit_mask, dtype=bool)
    if mask.shape != (batch,):
        raise ValueError(f"mask length {mask.shape} does not match batch {batch}")
    return mask


def _compact_small(h: np.ndarray, mask: np.ndarray) -> CompactionResult:
    cont_idx, exit_idx = [], []
    for i, flag in enumerate(mask):
        (exit_idx if flag else cont_idx).append(i)
    cont = np.asarray(cont_idx, dtype=np.int64)
    exi = np.asarray(exit_idx, dtype=np.int64)
    return CompactionResult(h[cont].copy(), h[exi].copy(), cont, exi)


def _compact_prefix_sum(h: np.ndarray, mask: np.ndarray) -> CompactionResult:
    n = mask.shape[0]
    ex = mask.astype(np.int64)
    keep = 1 - ex
    exit_dest = np.cumsum(ex) - ex  # exclusive prefix sums
    keep_dest = np.cumsum(keep) - keep
    n_exit = int(ex.sum())

    cont = np.empty((n - n_exit, h.shape[1]), dtype=h.dtype)
    exi = np.empty((n_exit, h.shape[1]), dtype=h.dtype)
    cont_idx = np.empty(n - n_exit, dtype=np.int64)
    exit_idx = np.empty(n_exit, dtype=np.int64)
    src = np.arange(n, dtype=np.int64)

    cont[keep_dest[~mask]] = h[~mask]
    cont_idx[keep_dest[~mask]] = src[~mask]
    exi[exit_dest[mask]] = h[mask]
    exit_idx[exit_dest[mask]] = src[mask]
    return CompactionResult(cont, exi, cont_idx, exit_idx)


def batch_compact(h: np.ndarray, exit_mask, strategy: str = "auto") -> CompactionResult:
    """Partition rows by mask, preserving original relative order in both halves.

    `strategy` selects "small" (sequential walk) or "prefix" (prefix-sum
    scatter); "auto" cuts over at SMALL_BATCH_CUTOVER rows. The two paths
    agree bitwise by contract.
    """
    h = as_f32(h)
    if h.ndim != 2:
        raise ValueError(f"expected [batch, d] rows, got {h.shape}")
    mask = _as_mask(exit_mask, h.shape[0])
    if strategy == "auto":
        strategy = "small" if h.shape[0] <= SMALL_BATCH_CUTOVER else "prefix"
    if strategy == "small":
        return _compact_small(h, mask)
    if strategy == "prefix":
        return _compact_prefix_sum(h, mask)
    raise ValueError(f"unknown strategy {strategy!r}")


def _check_positions(positions, out: np.ndarray, count: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (count,):
        raise ValueError(f"expected {count} positions, got shape {positions.shape}")
    if count == 0:
        return positions
    if positions[0] < 0 or positions[-1] >= out.shape[0]:
        raise ValueError(f"positions out of range [0, {out.shape[0]})")
    if np.any(np.diff(positions) <= 0):
        raise ValueError("positions must be strictly increasing")
    return positions


def exit_scatter(exited: np.ndarray, positions, out: np.ndarray) -> None:
    """Copy exited rows back to their original batch positions in `out`."""
    exited = as_f32(exited)
    if out.ndim != 2 or exited.ndim != 2 or exited.shape[1] != out.shape[1]:
        raise ValueError(f"row width mismatch: {exited.shape} into {out.shape}")
    positions = _check_positions(positions, out, exited.shape[0])
    out[positions] = exited


def exit_projection(exited: np.ndarray, final_norm_gain: np.ndarray | None, eps: float,
                    positions, out: np.ndarray) -> None:
    """Final-norm exited rows and scatter them to their original positions."""
    exited = as_f32(exited)
    if out.ndim != 2 or exited.ndim != 2 or exited.shape[1] != out.shape[1]:
        raise ValueError(f"row width mismatch: {exited.shape} into {out.shape}")
    positions = _check_positions(positions, out, exited.shape[0])
    if exited.shape[0] == 0:
        return
    out[positions] = rmsnorm(exited, final_norm_gain, eps)
