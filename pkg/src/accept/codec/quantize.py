"""Quantize/dequantize entry points that produce and consume blocks."""
from __future__ import annotations

import numpy as np

from .blocks import QuantizedFeatureBlock, QuantizedGradientBlock, RawBlock, as_shape4
from .mbq import MbqState, mbq_quantize, reconstruct
from .packing import backward_decode, backward_encode, forward_decode, forward_encode, gradient_range

GRADIENT_BITS = (4, 8)


def _check_tensor4(x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected an (n, w, h, c) tensor, got shape {x.shape}")
    as_shape4(x.shape)


def forward_quantize(x: np.ndarray, state: MbqState):
    """Quantize activations to k sign planes, pack them, attach the bias term.

    Returns (block, new_state).  ``block.mq`` is the mean of (x_hat - x), so
    the receiver's ``B @ alpha - mq`` has zero mean error.
    """
    _check_tensor4(x)
    B, alpha, new_state = mbq_quantize(x, state)
    x64 = x.astype(np.float64).reshape(-1)
    err = reconstruct(B, alpha) - x64
    mq = float(np.float32(err.mean()))
    k = state.k
    packed = forward_encode(B.reshape(x.shape + (k,)))
    block = QuantizedFeatureBlock(
        packed,
        alpha,
        mq,
        as_shape4(x.shape),
        k,
        max_abs_error=float(np.max(np.abs(err - mq))) if err.size else 0.0,
        residual_norm=float(np.linalg.norm(err)),
    )
    return block, new_state


def forward_dequantize(B: np.ndarray, alpha: np.ndarray, mq: float) -> np.ndarray:
    """x_hat = B alpha - m_q for signs B of shape (..., k)."""
    k = B.shape[-1]
    flat = reconstruct(B.reshape(-1, k), alpha) - mq
    return flat.reshape(B.shape[:-1]).astype(np.float32)


def decode_features(block: QuantizedFeatureBlock) -> np.ndarray:
    B = forward_decode(block.packed, block.shape, block.k)
    return forward_dequantize(B, block.alpha, block.mq)


def backward_quantize(g: np.ndarray, k: int, rng: np.random.Generator):
    """Scale by s = max|g| / (2^(k-1) - 1) and round stochastically.

    Returns (g_q as int8, s).  s is rounded to float32 before use so the
    receiver's g_q * s is unbiased with the transmitted scale; an all-zero
    input gives s = 0 and g_q = 0.
    """
    if k not in GRADIENT_BITS:
        raise ValueError(f"gradient bit width must be in {GRADIENT_BITS}, got {k}")
    g64 = np.asarray(g, dtype=np.float64)
    c = float(np.max(np.abs(g64))) if g64.size else 0.0
    if c == 0.0:
        return np.zeros(g64.shape, dtype=np.int8), 0.0
    if not np.isfinite(c):
        raise ValueError("gradient contains non-finite values")
    s = float(np.float32(c / (2 ** (k - 1) - 1)))
    q = g64 / s
    fl = np.floor(q)
    gq = fl + (rng.random(q.shape) < (q - fl))
    lo, hi = gradient_range(k)
    return np.clip(gq, lo, hi).astype(np.int8), s


def backward_dequantize(gq: np.ndarray, s: float) -> np.ndarray:
    return (gq.astype(np.float64) * s).astype(np.float32)


def compress_gradients(g: np.ndarray, k: int, rng: np.random.Generator) -> QuantizedGradientBlock:
    _check_tensor4(g)
    gq, s = backward_quantize(g, k, rng)
    return QuantizedGradientBlock(backward_encode(gq, k), s, as_shape4(g.shape), k)


def decode_gradients(block: QuantizedGradientBlock) -> np.ndarray:
    gq = backward_decode(block.packed, block.shape, block.k)
    return backward_dequantize(gq, block.s)


def decode_block(block) -> np.ndarray:
    if isinstance(block, QuantizedFeatureBlock):
        return decode_features(block)
    if isinstance(block, QuantizedGradientBlock):
        return decode_gradients(block)
    if isinstance(block, RawBlock):
        return block.data
    raise TypeError(f"not a codec block: {type(block).__name__}")
