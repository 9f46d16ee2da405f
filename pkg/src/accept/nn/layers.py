"""Layer descriptions and their forward/backward kernels.

Activations are rank-4 arrays laid out as (n, w, h, c).  Dense layers expect
w == h == 1, so a ``flatten`` layer sits between the convolutional trunk and
the dense head.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Shape3 = Tuple[int, int, int]
Params = Dict[str, np.ndarray]

KINDS = ("dense", "conv2d", "relu", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential model.

    ``in_shape`` is the per-sample (w, h, c) input shape; ``units`` is the
    number of output features (dense) or output channels (conv2d).
    """

    kind: str
    in_shape: Shape3
    units: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if len(self.in_shape) != 3 or min(self.in_shape) < 1:
            raise ValueError(f"in_shape must be three positive ints, got {self.in_shape}")
        if self.kind in ("dense", "conv2d") and self.units < 1:
            raise ValueError(f"{self.kind} layer needs units >= 1")
        if self.kind == "dense" and self.in_shape[:2] != (1, 1):
            raise ValueError(f"dense layer expects (1, 1, c) input, got {self.in_shape}; add a flatten layer")

    @property
    def out_shape(self) -> Shape3:
        w, h, c = self.in_shape
        if self.kind == "dense":
            return (1, 1, self.units)
        if self.kind == "conv2d":
            return (w, h, self.units)
        if self.kind == "flatten":
            return (1, 1, w * h * c)
        return self.in_shape

    @property
    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        c = self.in_shape[2]
        if self.kind == "dense":
            return {"W": (c, self.units), "b": (self.units,)}
        if self.kind == "conv2d":
            return {"W": (3, 3, c, self.units), "b": (self.units,)}
        return {}

    @property
    def flop_count(self) -> int:
        """Per-sample multiply-add flops (2 per MAC) of the forward pass."""
        w, h, c = self.in_shape
        if self.kind == "dense":
            return 2 * c * self.units
        if self.kind == "conv2d":
            return 2 * 9 * c * self.units * w * h
        if self.kind == "relu":
            return w * h * c
        return 0

    @property
    def output_elements(self) -> int:
        w, h, c = self.out_shape
        return w * h * c

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in_shape": list(self.in_shape), "units": self.units}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], tuple(d["in_shape"]), d.get("units", 0))


def check_composes(specs: Sequence[LayerSpec]) -> None:
    for i in range(1, len(specs)):
        if specs[i - 1].out_shape != specs[i].in_shape:
            raise ValueError(
                f"layer {i - 1} output {specs[i - 1].out_shape} does not match "
                f"layer {i} input {specs[i].in_shape}"
            )


def build_sequential(input_shape: Shape3, layers: Sequence[Sequence]) -> list[LayerSpec]:
    """Build specs from a compact description such as
    ``[("conv2d", 8), ("relu",), ("flatten",), ("dense", 10)]``."""
    specs = []
    shape = tuple(input_shape)
    for item in layers:
        kind = item[0]
        units = item[1] if len(item) > 1 else 0
        spec = LayerSpec(kind, shape, units)
        specs.append(spec)
        shape = spec.out_shape
    return specs


def mlp(in_features: int, hidden: Sequence[int], out_features: int) -> list[LayerSpec]:
    layers: list = []
    for width in hidden:
        layers += [("dense", width), ("relu",)]
    layers.append(("dense", out_features))
    return build_sequential((1, 1, in_features), layers)


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> Params:
    if spec.kind == "dense":
        fan_in, fan_out = spec.in_shape[2], spec.units
    elif spec.kind == "conv2d":
        fan_in, fan_out = 9 * spec.in_shape[2], 9 * spec.units
    else:
        return {}
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shapes = spec.param_shapes
    return {
        "W": rng.uniform(-limit, limit, size=shapes["W"]).astype(dtype),
        "b": np.zeros(shapes["b"], dtype=dtype),
    }


# -- kernels ---------------------------------------------------------------
# Each forward returns (output, cache); each backward maps
# (params, cache, dy) -> (param_grads, dx).


def _dense_fwd(p: Params, x: np.ndarray):
    n = x.shape[0]
    x2 = x.reshape(n, -1)
    y = x2 @ p["W"] + p["b"]
    return y.reshape(n, 1, 1, -1), x2


def _dense_bwd(p: Params, x2: np.ndarray, dy: np.ndarray):
    n = dy.shape[0]
    dy2 = dy.reshape(n, -1)
    grads = {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}
    dx = (dy2 @ p["W"].T).reshape(n, 1, 1, -1)
    return grads, dx


def _im2col(x: np.ndarray) -> np.ndarray:
    n, w, h, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, w, h, c, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * w * h, 9 * c)


def _conv_fwd(p: Params, x: np.ndarray):
    n, w, h, c = x.shape
    cols = _im2col(x)
    W = p["W"].reshape(9 * c, -1)
    y = cols @ W + p["b"]
    return y.reshape(n, w, h, -1), (cols, x.shape)


def _conv_bwd(p: Params, cache, dy: np.ndarray):
    cols, (n, w, h, c) = cache
    dy2 = dy.reshape(n * w * h, -1)
    W = p["W"].reshape(9 * c, -1)
    grads = {"W": (cols.T @ dy2).reshape(p["W"].shape), "b": dy2.sum(axis=0)}
    dcols = (dy2 @ W.T).reshape(n, w, h, 3, 3, c)
    dxp = np.zeros((n, w + 2, h + 2, c), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + w, j:j + h, :] += dcols[:, :, :, i, j, :]
    return grads, dxp[:, 1:-1, 1:-1, :]


def _relu_fwd(p: Params, x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def _relu_bwd(p: Params, mask: np.ndarray, dy: np.ndarray):
    return {}, np.where(mask, dy, 0).astype(dy.dtype, copy=False)


def _flatten_fwd(p: Params, x: np.ndarray):
    return x.reshape(x.shape[0], 1, 1, -1), x.shape


def _flatten_bwd(p: Params, shape, dy: np.ndarray):
    return {}, dy.reshape(shape)


KERNELS: Dict[str, Tuple[Callable, Callable]] = {
    "dense": (_dense_fwd, _dense_bwd),
    "conv2d": (_conv_fwd, _conv_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "flatten": (_flatten_fwd, _flatten_bwd),
}
