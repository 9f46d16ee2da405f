"""Simulated compute cost of stage operations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..latency.synthetic import SyntheticDevice, layer_costs

# share of a training step spent in the forward pass
FORWARD_SHARE = 1.0 / 3.0


@dataclass(frozen=True)
class Slowdown:
    """Multiply node ``node``'s compute time by ``factor`` from simulated time ``start_ms`` on."""

    node: int
    start_ms: float
    factor: float


class ConstantCost:
    """Fixed forward/backward time per stage, independent of its layer range; no codec cost."""

    def __init__(self, forward_ms: Sequence[float], backward_ms: Sequence[float]):
        self.forward_ms = list(forward_ms)
        self.backward_ms = list(backward_ms)

    def op_ms(self, node: int, a: int, b: int, direction: str, now_ms: float) -> float:
        return self.forward_ms[node] if direction == "forward" else self.backward_ms[node]

    def codec_ms(self, node: int, elements: int, k: int | None, direction: str, encode: bool) -> float:
        return 0.0

    def profile_ms(self, node: int, now_ms: float = 0.0) -> float:
        return 0.0


class DeviceCost:
    """Per-node synthetic devices running a concrete model.

    A training step of layers a..b costs the device's layer times for that
    range, split 1:2 between forward and backward, with uniform jitter of at
    most ``device.noise``.  Codec work is charged as memory-bound passes over
    the tensor: k + 1 passes to quantize features, 3 for gradients, 2 to decode.
    """

    def __init__(self, devices: Sequence[SyntheticDevice], specs, batch_size: int, seed: int = 0,
                 slowdowns: Sequence[Slowdown] = ()):
        self.devices = list(devices)
        self.costs = layer_costs(specs, batch_size)
        self.layer_ms = [d.layer_times(self.costs) for d in self.devices]
        self.rng = np.random.default_rng(seed)
        self.slowdowns = list(slowdowns)

    def factor(self, node: int, now_ms: float) -> float:
        f = 1.0
        for s in self.slowdowns:
            if s.node == node and now_ms >= s.start_ms:
                f *= s.factor
        return f

    def effective_device(self, node: int, now_ms: float) -> SyntheticDevice:
        return self.devices[node].scaled(self.factor(node, now_ms)) if self.factor(node, now_ms) != 1.0 else self.devices[node]

    def op_ms(self, node: int, a: int, b: int, direction: str, now_ms: float) -> float:
        step = float(self.layer_ms[node][a - 1:b].sum())
        share = FORWARD_SHARE if direction == "forward" else 1.0 - FORWARD_SHARE
        noise = self.devices[node].noise
        return step * share * self.factor(node, now_ms) * (1.0 + self.rng.uniform(-noise, noise))

    def codec_ms(self, node: int, elements: int, k: int | None, direction: str, encode: bool) -> float:
        if k is None:
            return 0.0
        passes = (k + 1 if direction == "forward" else 3) if encode else 2
        return elements * 4.0 * passes / (self.devices[node].mem_gbps * 1e6)

    def profile_ms(self, node: int, now_ms: float = 0.0) -> float:
        """Time to measure the ten-sub-model hardware profile (20 runs + 3 warm-up each)."""
        from ..latency.encoding import select_representative_submodels
        from ..latency.synthetic import layer_flops

        reps = select_representative_submodels(layer_flops(self.costs))
        return 23 * self.factor(node, now_ms) * sum(float(self.layer_ms[node][r.start - 1:r.end].sum()) for r in reps)
