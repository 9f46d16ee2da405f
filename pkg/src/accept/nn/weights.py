"""Versioned parameter sets, the SGD step, and the flat binary checkpoint."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from .layers import LayerSpec, Params, init_params

CHECKPOINT_MAGIC = b"EPT1"


class NonFiniteGradientError(ValueError):
    pass


def _frozen(params: Params) -> Params:
    out = {}
    for name, arr in params.items():
        # an array we froze earlier owns its read-only buffer, so it can be shared
        if isinstance(arr, np.ndarray) and not arr.flags.writeable and arr.base is None:
            out[name] = arr
            continue
        arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        out[name] = arr
    return out


@dataclass(frozen=True)
class VersionedWeights:
    """Immutable per-layer parameters tagged with an optimizer-step counter.

    ``params`` holds one dict per layer (empty for parameter-free layers).
    """

    version: int
    params: Tuple[Params, ...]

    def __post_init__(self):
        if self.version < 0:
            raise ValueError("version must be non-negative")
        object.__setattr__(self, "params", tuple(_frozen(p) for p in self.params))

    def __len__(self):
        return len(self.params)

    def slice(self, start: int, stop: int) -> "VersionedWeights":
        return VersionedWeights(self.version, self.params[start:stop])

    def astype(self, dtype) -> "VersionedWeights":
        return VersionedWeights(
            self.version, tuple({k: v.astype(dtype) for k, v in p.items()} for p in self.params)
        )

    def equal(self, other: "VersionedWeights") -> bool:
        if self.version != other.version or len(self.params) != len(other.params):
            return False
        for a, b in zip(self.params, other.params):
            if a.keys() != b.keys():
                return False
            if any(not np.array_equal(a[k], b[k]) for k in a):
                return False
        return True

    @staticmethod
    def concat(parts: Sequence["VersionedWeights"], version: int | None = None) -> "VersionedWeights":
        if version is None:
            version = parts[0].version
        params: list = []
        for part in parts:
            params.extend(part.params)
        return VersionedWeights(version, tuple(params))


def init_weights(specs: Sequence[LayerSpec], seed: int, dtype=np.float32) -> VersionedWeights:
    rng = np.random.default_rng(seed)
    return VersionedWeights(0, tuple(init_params(s, rng, dtype) for s in specs))


def sgd_step(weights: VersionedWeights, grads: Sequence[Params], lr: float) -> VersionedWeights:
    """Return ``w - lr * grad`` with the version bumped by one.

    Raises NonFiniteGradientError (leaving the caller's weights untouched) if any
    gradient entry is NaN or infinite.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(weights.params):
        raise ValueError(f"expected {len(weights.params)} gradient entries, got {len(grads)}")
    for i, (p, g) in enumerate(zip(weights.params, grads)):
        if p.keys() != g.keys():
            raise ValueError(f"layer {i}: gradient names {sorted(g)} != parameter names {sorted(p)}")
        for name in p:
            if g[name].shape != p[name].shape:
                raise ValueError(f"layer {i} {name}: grad shape {g[name].shape} != param shape {p[name].shape}")
            if not np.all(np.isfinite(g[name])):
                raise NonFiniteGradientError(f"non-finite gradient in layer {i} {name}; step rejected")
    new = tuple(
        {name: (p[name] - p[name].dtype.type(lr) * g[name]).astype(p[name].dtype) for name in p}
        for p, g in zip(weights.params, grads)
    )
    return VersionedWeights(weights.version + 1, new)


# Checkpoint layout (little-endian): b"EPT1", u32 layer count, then for each
# layer u32 tensor count and, per tensor (sorted by name), u32 ndim, u32 dims,
# and the f32 payload.


def checkpoint_bytes(weights: VersionedWeights) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(weights.params))]
    for p in weights.params:
        out.append(struct.pack("<I", len(p)))
        for name in sorted(p):
            arr = np.ascontiguousarray(p[name], dtype="<f4")
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
    return b"".join(out)


def checkpoint_nbytes(weights: VersionedWeights) -> int:
    """``len(checkpoint_bytes(weights))`` without serializing."""
    n = len(CHECKPOINT_MAGIC) + 4
    for p in weights.params:
        n += 4 + sum(4 + 4 * np.ndim(a) + 4 * int(np.size(a)) for a in p.values())
    return n


def weights_from_checkpoint(
    data: bytes, specs: Sequence[LayerSpec] | None = None, version: int = 0
) -> VersionedWeights:
    """Parse a checkpoint.  Tensor names come from ``specs`` when given,
    otherwise the standard ("W", "b") ordering is assumed."""
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}")
    off = 4
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    if specs is not None and len(specs) != n_layers:
        raise ValueError(f"checkpoint has {n_layers} layers, model has {len(specs)}")
    params = []
    for li in range(n_layers):
        (n_tensors,) = struct.unpack_from("<I", data, off)
        off += 4
        names = sorted(specs[li].param_shapes) if specs is not None else ["W", "b"][:n_tensors]
        if len(names) != n_tensors:
            raise ValueError(f"layer {li}: checkpoint has {n_tensors} tensors, expected {len(names)}")
        layer = {}
        for name in names:
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 4 * count > len(data):
                raise ValueError(f"truncated checkpoint at byte {off}")
            layer[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
            off += 4 * count
        params.append(layer)
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes in checkpoint")
    return VersionedWeights(version, tuple(params))


def save_checkpoint(weights: VersionedWeights, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(weights))


def load_checkpoint(path, specs: Sequence[LayerSpec] | None = None, version: int = 0) -> VersionedWeights:
    return weights_from_checkpoint(Path(path).read_bytes(), specs, version)
