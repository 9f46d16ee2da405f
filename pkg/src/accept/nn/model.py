"""Forward pass with a recorded tape, and reverse-mode gradients over it."""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from .layers import KERNELS, LayerSpec, Params, check_composes
from .weights import VersionedWeights


class TapeConsumedError(RuntimeError):
    pass


class Tape:
    """Per-layer caches from one forward call.  ``backward`` may run once."""

    def __init__(self, specs: Sequence[LayerSpec], params: Sequence[Params], caches: list, version: int):
        self.specs = list(specs)
        self.params = list(params)
        self.caches = caches
        self.version = version
        self.consumed = False

    def backward(self, output_grad: np.ndarray) -> Tuple[List[Params], np.ndarray]:
        if self.consumed:
            raise TapeConsumedError("tape already consumed by a previous backward call")
        expected = (output_grad.shape[0],) + self.specs[-1].out_shape if self.specs else None
        if expected is not None and output_grad.shape != expected:
            raise ValueError(f"output_grad shape {output_grad.shape} does not match layer output {expected}")
        self.consumed = True
        grads: List[Params] = [{} for _ in self.specs]
        dy = output_grad
        for i in range(len(self.specs) - 1, -1, -1):
            _, bwd = KERNELS[self.specs[i].kind]
            grads[i], dy = bwd(self.params[i], self.caches[i], dy)
        self.caches = []
        return grads, dy


def forward(specs: Sequence[LayerSpec], weights: VersionedWeights, x: np.ndarray) -> Tuple[np.ndarray, Tape]:
    """Run ``x`` (n, w, h, c) through ``specs`` with ``weights``."""
    if len(specs) != len(weights.params):
        raise ValueError(f"{len(specs)} layers but {len(weights.params)} parameter sets")
    check_composes(specs)
    if specs:
        if x.ndim != 4 or x.shape[1:] != specs[0].in_shape:
            raise ValueError(f"input shape {x.shape} does not match first layer input (n,) + {specs[0].in_shape}")
    for i, (spec, p) in enumerate(zip(specs, weights.params)):
        want = spec.param_shapes
        got = {k: v.shape for k, v in p.items()}
        if want != got:
            raise ValueError(f"layer {i} ({spec.kind}) expects parameters {want}, got {got}")
    caches = []
    y = x
    for spec, p in zip(specs, weights.params):
        fwd, _ = KERNELS[spec.kind]
        y, cache = fwd(p, y)
        caches.append(cache)
    return y, Tape(specs, weights.params, caches, weights.version)


def ste_grad(quantizer_output_grad: np.ndarray) -> np.ndarray:
    """Straight-through estimator: quantize/dequantize is identity backwards."""
    return quantizer_output_grad


def predict_classes(specs, weights, x) -> np.ndarray:
    logits, _ = forward(specs, weights, x)
    return logits.reshape(len(x), -1).argmax(axis=1)
