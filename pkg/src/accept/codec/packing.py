"""Bit-level encoders for quantized activations and gradients.

Packing always runs along the batch axis.  Activations: eight sign bits per
byte, first batch element in the most significant bit, -1 stored as 0.
Gradients: k=8 is sent as raw int8; k=4 is offset by +8 and two batch
elements share a byte, first one in the high nibble.  Short trailing groups
are padded with zero bits.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np


def _packed_rows(n: int, per_byte: int) -> int:
    return -(-n // per_byte)


def forward_encode(B: np.ndarray) -> np.ndarray:
    """Pack a sign tensor of shape (n, w, h, c, k) into (ceil(n/8), w, h, c, k) bytes."""
    B = np.asarray(B)
    if B.ndim != 5:
        raise ValueError(f"expected sign tensor of rank 5 (n, w, h, c, k), got shape {B.shape}")
    return np.packbits(B > 0, axis=0, bitorder="big")


def forward_decode(packed, shape: Sequence[int], k: int) -> np.ndarray:
    """Inverse of forward_encode; returns int8 signs of shape (n, w, h, c, k)."""
    n, w, h, c = shape
    rows = _packed_rows(n, 8)
    buf = np.frombuffer(bytes(packed), dtype=np.uint8) if not isinstance(packed, np.ndarray) else packed
    if buf.size != rows * w * h * c * k:
        raise ValueError(f"packed length {buf.size} does not match shape {tuple(shape)} with k={k} "
                         f"(expected {rows * w * h * c * k})")
    bits = np.unpackbits(buf.reshape(rows, w, h, c, k), axis=0, count=n, bitorder="big")
    return np.where(bits == 1, 1, -1).astype(np.int8)


def forward_unencoded(B: np.ndarray) -> np.ndarray:
    """One byte per sign bit: what MBQ costs on the wire without the encoder."""
    return (np.asarray(B) > 0).astype(np.uint8)


def gradient_range(k: int) -> tuple[int, int]:
    return -(2 ** (k - 1)), 2 ** (k - 1) - 1


def backward_encode(gq: np.ndarray, k: int) -> np.ndarray:
    gq = np.asarray(gq)
    if k not in (4, 8):
        raise ValueError(f"gradient bit width must be 4 or 8, got {k}")
    lo, hi = gradient_range(k)
    if gq.size and (gq.min() < lo or gq.max() > hi):
        raise ValueError(f"quantized gradient outside [{lo}, {hi}] for k={k}")
    if k == 8:
        return gq.astype(np.int8).view(np.uint8)
    u = (gq.astype(np.int16) + 8).astype(np.uint8)
    if u.shape[0] % 2:
        u = np.concatenate([u, np.zeros((1,) + u.shape[1:], dtype=np.uint8)], axis=0)
    return (u[0::2] << 4) | u[1::2]


def backward_decode(packed, shape: Sequence[int], k: int) -> np.ndarray:
    n = shape[0]
    rest = tuple(shape[1:])
    buf = np.frombuffer(bytes(packed), dtype=np.uint8) if not isinstance(packed, np.ndarray) else packed.reshape(-1)
    per_row = int(np.prod(rest)) if rest else 1
    if k == 8:
        if buf.size != n * per_row:
            raise ValueError(f"packed length {buf.size} does not match shape {tuple(shape)} for k=8")
        return buf.view(np.int8).reshape((n,) + rest).copy()
    if k != 4:
        raise ValueError(f"gradient bit width must be 4 or 8, got {k}")
    rows = _packed_rows(n, 2)
    if buf.size != rows * per_row:
        raise ValueError(f"packed length {buf.size} does not match shape {tuple(shape)} for k=4 "
                         f"(expected {rows * per_row})")
    p = buf.reshape((rows,) + rest)
    out = np.empty((2 * rows,) + rest, dtype=np.int8)
    out[0::2] = (p >> 4).astype(np.int8) - 8
    out[1::2] = (p & 0x0F).astype(np.int8) - 8
    return out[:n]
