"""Compressed block types, their byte layout, and size arithmetic.

Serialized layout (little-endian)::

    u8 kind          0 = features, 1 = gradients, 2 = raw float32
    u8 k             bit width (32 for raw)
    u32 x 4          n, w, h, c
    features:  k x f32 alpha, f32 m_q, packed sign bytes
    gradients: f32 s, packed gradient bytes
    raw:       n*w*h*c x f32
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

Shape4 = Tuple[int, int, int, int]

KIND_FEATURES = 0
KIND_GRADIENTS = 1
KIND_RAW = 2

HEADER = struct.Struct("<BB4I")
HEADER_BYTES = HEADER.size  # 18


def as_shape4(shape) -> Shape4:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ValueError(f"expected a positive (n, w, h, c) shape, got {shape}")
    return shape  # type: ignore[return-value]


@dataclass(eq=False)
class QuantizedFeatureBlock:
    packed: np.ndarray  # uint8, (ceil(n/8), w, h, c, k)
    alpha: np.ndarray  # float32, (k,)
    mq: float
    shape: Shape4
    k: int
    # sender-side diagnostics, never serialized
    max_abs_error: float = field(default=float("nan"), compare=False)
    residual_norm: float = field(default=float("nan"), compare=False)


@dataclass(eq=False)
class QuantizedGradientBlock:
    packed: np.ndarray  # uint8
    s: float
    shape: Shape4
    k: int


@dataclass(eq=False)
class RawBlock:
    data: np.ndarray  # float32, (n, w, h, c)

    @property
    def shape(self) -> Shape4:
        return tuple(self.data.shape)  # type: ignore[return-value]

    k = 32


Block = Union[QuantizedFeatureBlock, QuantizedGradientBlock, RawBlock]


def packed_feature_bytes(shape, k: int) -> int:
    n, w, h, c = as_shape4(shape)
    return -(-n // 8) * w * h * c * k


def packed_gradient_bytes(shape, k: int) -> int:
    n, w, h, c = as_shape4(shape)
    if k == 8:
        return n * w * h * c
    if k == 4:
        return -(-n // 2) * w * h * c
    raise ValueError(f"gradient bit width must be 4 or 8, got {k}")


def feature_block_nbytes(shape, k: int) -> int:
    return HEADER_BYTES + 4 * k + 4 + packed_feature_bytes(shape, k)


def gradient_block_nbytes(shape, k: int) -> int:
    return HEADER_BYTES + 4 + packed_gradient_bytes(shape, k)


def raw_block_nbytes(shape) -> int:
    n, w, h, c = as_shape4(shape)
    return HEADER_BYTES + 4 * n * w * h * c


def compression_ratio_forward(shape, k: int) -> float:
    """Uncompressed bits over (packed bases + alpha + m_q) bits."""
    n, w, h, c = as_shape4(shape)
    return (n * w * h * c * 32) / (-(-n // 8) * w * h * c * k * 8 + 32 * (k + 1))


def compression_ratio_backward(shape, k: int) -> float:
    """Uncompressed bits over (packed gradients + scale) bits; about 32/k."""
    n, w, h, c = as_shape4(shape)
    return (n * w * h * c * 32) / (packed_gradient_bytes(shape, k) * 8 + 32)


def serialize_block(block: Block) -> bytes:
    if isinstance(block, QuantizedFeatureBlock):
        head = HEADER.pack(KIND_FEATURES, block.k, *block.shape)
        alpha = np.asarray(block.alpha, dtype="<f4")
        if alpha.size != block.k:
            raise ValueError(f"alpha has {alpha.size} entries for k={block.k}")
        return head + alpha.tobytes() + struct.pack("<f", block.mq) + np.ascontiguousarray(block.packed, np.uint8).tobytes()
    if isinstance(block, QuantizedGradientBlock):
        head = HEADER.pack(KIND_GRADIENTS, block.k, *block.shape)
        return head + struct.pack("<f", block.s) + np.ascontiguousarray(block.packed, np.uint8).tobytes()
    if isinstance(block, RawBlock):
        head = HEADER.pack(KIND_RAW, 32, *block.shape)
        return head + np.ascontiguousarray(block.data, dtype="<f4").tobytes()
    raise TypeError(f"cannot serialize {type(block).__name__}")


def deserialize_block(data: bytes) -> Block:
    if len(data) < HEADER_BYTES:
        raise ValueError(f"block truncated: {len(data)} bytes, header needs {HEADER_BYTES}")
    kind, k, n, w, h, c = HEADER.unpack_from(data, 0)
    shape = as_shape4((n, w, h, c))
    body = memoryview(data)[HEADER_BYTES:]
    if kind == KIND_FEATURES:
        want = feature_block_nbytes(shape, k) - HEADER_BYTES
        if len(body) != want:
            raise ValueError(f"feature block body is {len(body)} bytes, expected {want}")
        alpha = np.frombuffer(body, dtype="<f4", count=k).astype(np.float32)
        (mq,) = struct.unpack_from("<f", body, 4 * k)
        packed = np.frombuffer(body, dtype=np.uint8, offset=4 * k + 4).reshape((-(-n // 8), w, h, c, k))
        return QuantizedFeatureBlock(packed, alpha, mq, shape, k)
    if kind == KIND_GRADIENTS:
        want = gradient_block_nbytes(shape, k) - HEADER_BYTES
        if len(body) != want:
            raise ValueError(f"gradient block body is {len(body)} bytes, expected {want}")
        (s,) = struct.unpack_from("<f", body, 0)
        packed = np.frombuffer(body, dtype=np.uint8, offset=4)
        return QuantizedGradientBlock(packed, s, shape, k)
    if kind == KIND_RAW:
        want = raw_block_nbytes(shape) - HEADER_BYTES
        if len(body) != want:
            raise ValueError(f"raw block body is {len(body)} bytes, expected {want}")
        return RawBlock(np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32))
    raise ValueError(f"unknown block kind {kind}")
