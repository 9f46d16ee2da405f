"""Multi-bit binary-basis quantization of activations.

A flattened activation vector x (length N) is approximated as B @ alpha with
B in {-1, +1}^(N x k).  Batch 0 of an epoch seeds (B, alpha) greedily from the
residue; later batches assign each element to the nearest signed sum of the
previous alpha, solve least squares for a fresh alpha, and blend the two with
an exponential moving average.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

FORWARD_BITS = (1, 2, 3, 4)


@dataclass(frozen=True)
class MbqState:
    """Quantizer state carried across the batches of one epoch at one cut."""

    k: int
    alpha: Optional[np.ndarray] = None
    t: int = 0

    def reset(self, k: Optional[int] = None) -> "MbqState":
        return MbqState(self.k if k is None else k)


def ema_beta(t: int) -> float:
    return min(0.9, (1 + t) / (10 + t))


def sign_patterns(k: int) -> np.ndarray:
    """All 2^k sign rows, shape (2^k, k); row p has +1 in column j iff bit j of p is set."""
    p = np.arange(2**k)[:, None]
    return np.where((p >> np.arange(k)) & 1, 1, -1).astype(np.int8)


def codewords(alpha: np.ndarray):
    """Sorted codeword values and the sign pattern that produces each one.

    Equal values keep pattern order, so lookups are deterministic.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    pats = sign_patterns(len(alpha))
    vals = pats @ alpha
    order = np.argsort(vals, kind="stable")
    return vals[order], pats[order]


def mbq_init_residue(x: np.ndarray, k: int):
    """Greedy residue fit: B_j = sign(r), alpha_j = mean|r|, r -= alpha_j B_j.

    Bases are returned ordered by decreasing alpha.  Zero residue entries get
    sign +1, so an all-zero input yields B = +1 and alpha = 0.
    """
    if k not in FORWARD_BITS:
        raise ValueError(f"forward bit width must be in {FORWARD_BITS}, got {k}")
    r = np.asarray(x, dtype=np.float64).reshape(-1).copy()
    if not np.all(np.isfinite(r)):
        raise ValueError("input contains non-finite values")
    B = np.empty((r.size, k), dtype=np.int8)
    alpha = np.empty(k)
    for j in range(k):
        b = np.where(r >= 0, 1, -1).astype(np.int8)
        a = float(np.mean(np.abs(r))) if r.size else 0.0
        B[:, j] = b
        alpha[j] = a
        r -= a * b
    order = np.argsort(-alpha, kind="stable")
    return B[:, order], alpha[order]


def mbq_assign_bases(x: np.ndarray, alpha_prev: np.ndarray) -> np.ndarray:
    """Map every element to the sign row of its nearest codeword.

    Midpoints between sorted codewords act as thresholds; an element exactly
    on a midpoint goes to the smaller codeword.
    """
    vals, pats = codewords(alpha_prev)
    thresholds = (vals[1:] + vals[:-1]) / 2
    idx = np.searchsorted(thresholds, np.asarray(x, dtype=np.float64).reshape(-1), side="left")
    return pats[idx]


def mbq_assign_bases_bisect(x: np.ndarray, alpha_prev: np.ndarray) -> np.ndarray:
    """Element-wise binary search over the sorted codewords (slow reference path)."""
    vals, pats = codewords(alpha_prev)
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    out = np.empty((flat.size, len(alpha_prev)), dtype=np.int8)
    for i, v in enumerate(flat):
        lo, hi = 0, len(vals) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if v > (vals[mid] + vals[mid + 1]) / 2:
                lo = mid + 1
            else:
                hi = mid
        out[i] = pats[lo]
    return out


def least_squares_alpha(B: np.ndarray, x: np.ndarray) -> Optional[np.ndarray]:
    """(B^T B)^-1 B^T x, or None when B^T B is singular."""
    Bf = B.astype(np.float64)
    gram = Bf.T @ Bf
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        return None
    return np.linalg.solve(gram, Bf.T @ np.asarray(x, dtype=np.float64).reshape(-1))


def mbq_update_alpha(B: np.ndarray, x: np.ndarray, alpha_prev: np.ndarray, t: int) -> np.ndarray:
    if t < 1:
        raise ValueError("alpha update applies from batch 1 onwards")
    alpha_prev = np.asarray(alpha_prev, dtype=np.float64)
    alpha_cur = least_squares_alpha(B, x)
    if alpha_cur is None:
        log.info("singular B^T B at batch %d; keeping previous alpha", t)
        alpha_cur = alpha_prev
    beta = ema_beta(t)
    return beta * alpha_prev + (1 - beta) * alpha_cur


def mbq_quantize(x: np.ndarray, state: MbqState):
    """One quantizer step.  Returns (B, alpha, new_state); alpha is float32."""
    k = state.k
    if state.t == 0 or state.alpha is None or len(state.alpha) != k:
        B, alpha = mbq_init_residue(x, k)
    else:
        B = mbq_assign_bases(x, state.alpha)
        alpha = mbq_update_alpha(B, x, state.alpha, state.t)
    alpha = alpha.astype(np.float32)
    return B, alpha, MbqState(k, alpha, state.t + 1)


def reconstruct(B: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """B @ alpha in float64, using alpha exactly as transmitted."""
    return B.astype(np.float64) @ np.asarray(alpha, dtype=np.float32).astype(np.float64)
