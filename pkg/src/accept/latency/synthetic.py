"""Synthetic device latency generator.

Each layer carries a compute cost (training flops) and a memory-traffic cost
(bytes).  A device turns these into milliseconds with its own compute speed,
memory bandwidth, per-layer dispatch overhead and convolution efficiency
(how well its vector units suit im2col GEMMs relative to plain matmuls), so
two devices can rank the same layers differently.  That is what makes a single flops slope, or a single
speed ratio measured on one sub-model, a poor latency model.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..nn.layers import LayerSpec
from .encoding import SubModelEncoding, all_submodels, select_representative_submodels


@dataclass(frozen=True)
class LayerCost:
    flops: float
    mem_bytes: float
    conv: bool = False


def layer_costs(specs: Sequence[LayerSpec], batch_size: int) -> list[LayerCost]:
    """Cost of one training step (forward + backward) of each layer on a batch."""
    out = []
    for s in specs:
        w, h, c = s.in_shape
        n_params = sum(int(np.prod(shape)) for shape in s.param_shapes.values())
        acts = (w * h * c + s.output_elements) * batch_size
        out.append(LayerCost(3.0 * s.flop_count * batch_size, 4.0 * (3 * n_params + 3 * acts), s.kind == "conv2d"))
    return out


def layer_flops(costs: Sequence[LayerCost]) -> np.ndarray:
    return np.array([c.flops for c in costs], dtype=np.float64)


@dataclass(frozen=True)
class SyntheticDevice:
    name: str
    gflops: float  # sustained compute, 1e9 flop/s
    mem_gbps: float  # memory bandwidth, 1e9 byte/s
    overhead_ms: float  # per-layer dispatch cost
    noise: float = 0.02  # max relative run-to-run jitter
    conv_eff: float = 1.0  # conv2d flop rate relative to ``gflops``

    def __post_init__(self):
        if min(self.gflops, self.mem_gbps, self.conv_eff) <= 0 or self.overhead_ms < 0:
            raise ValueError(f"device {self.name}: speeds must be positive")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must be in [0, 1)")

    def layer_times(self, costs: Sequence[LayerCost]) -> np.ndarray:
        """Noise-free per-layer time in ms."""
        f = np.array([c.flops for c in costs])
        m = np.array([c.mem_bytes for c in costs])
        rate = np.where([c.conv for c in costs], self.gflops * self.conv_eff, self.gflops)
        return f / (rate * 1e6) + m / (self.mem_gbps * 1e6) + self.overhead_ms

    def submodel_time(self, costs: Sequence[LayerCost], start: int, end: int) -> float:
        return float(np.sum(self.layer_times(costs)[start - 1:end]))

    def run(self, costs: Sequence[LayerCost], start: int, end: int, rng: np.random.Generator) -> float:
        """One timed execution: the true time with uniform jitter of at most ``noise``."""
        return self.submodel_time(costs, start, end) * (1.0 + rng.uniform(-self.noise, self.noise))

    def measure(self, costs, start: int, end: int, rng: np.random.Generator, runs: int = 20, warmup: int = 3) -> float:
        """Median of ``runs`` timed executions after ``warmup`` discarded ones."""
        samples = [self.run(costs, start, end, rng) for _ in range(warmup + runs)]
        return float(np.median(samples[warmup:]))

    def scaled(self, factor: float, name: str | None = None) -> "SyntheticDevice":
        """Same device with every cost multiplied by ``factor`` (a linear family)."""
        return replace(
            self,
            name=name or f"{self.name}x{factor:g}",
            gflops=self.gflops / factor,
            mem_gbps=self.mem_gbps / factor,
            overhead_ms=self.overhead_ms * factor,
        )


# Six base machines (gflops, mem GB/s, overhead ms, conv efficiency); the 24
# configurations pin each to 1..4 cores.  Compute scales almost linearly with
# cores, memory bandwidth much less so.
BASE_MACHINES = {
    "xeon": (6.0, 5.0, 0.06, 1.0),
    "epyc": (4.0, 2.5, 0.10, 1.3),
    "kunpeng": (2.5, 3.0, 0.15, 0.55),
    "core-i7": (8.0, 4.0, 0.05, 1.1),
    "ryzen": (7.0, 6.0, 0.08, 0.8),
    "cortex": (3.0, 1.2, 0.20, 0.45),
}


def device_configs(cores: Sequence[int] = (1, 2, 3, 4), noise: float = 0.02) -> list[SyntheticDevice]:
    out = []
    for name, base in BASE_MACHINES.items():
        for k in cores:
            out.append(machine(name, base, k, noise))
    return out


def machine(name: str, base: tuple, cores: int, noise: float = 0.02) -> SyntheticDevice:
    g, m, o, conv = base
    return SyntheticDevice(f"{name}-{cores}c", g * cores**0.9, m * cores**0.5, o * (1 + 1.0 / cores), noise, conv)


UNSEEN_MACHINE = ("gold", (6.5, 3.0, 0.07, 1.6))


def unseen_device(cores: int = 3, noise: float = 0.02) -> SyntheticDevice:
    """A machine outside the six base families."""
    return machine(UNSEEN_MACHINE[0], UNSEEN_MACHINE[1], cores, noise)


@dataclass(frozen=True)
class HardwareProfile:
    times: tuple  # 10 floats, ms

    def __post_init__(self):
        if len(self.times) != 10:
            raise ValueError(f"profile needs 10 times, got {len(self.times)}")
        if any(not t >= 0 for t in self.times):
            raise ValueError("profile times must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.times, dtype=np.float64)


@dataclass(frozen=True)
class LatencySample:
    encoding: SubModelEncoding
    profile: HardwareProfile
    time_ms: float

    def __post_init__(self):
        if not self.time_ms > 0:
            raise ValueError(f"sample time must be positive, got {self.time_ms}")


def measure_profile(device: SyntheticDevice, costs, rng: np.random.Generator, runs: int = 20, warmup: int = 3) -> HardwareProfile:
    reps = select_representative_submodels(layer_flops(costs))
    return HardwareProfile(tuple(device.measure(costs, r.start, r.end, rng, runs, warmup) for r in reps))


def device_samples(device: SyntheticDevice, costs, rng: np.random.Generator, profile: HardwareProfile | None = None, runs: int = 20) -> list[LatencySample]:
    """Measure every contiguous sub-model on one device."""
    if profile is None:
        profile = measure_profile(device, costs, rng)
    L = len(costs)
    return [LatencySample(s, profile, device.measure(costs, s.start, s.end, rng, runs)) for s in all_submodels(L)]


def build_dataset(devices: Sequence[SyntheticDevice], costs, seed: int) -> list[LatencySample]:
    rng = np.random.default_rng(seed)
    out: list[LatencySample] = []
    for d in devices:
        out.extend(device_samples(d, costs, rng))
    return out


def reference_model_specs() -> list[LayerSpec]:
    """16-layer CNN whose layers span compute-bound and memory-bound costs."""
    from ..nn.layers import build_sequential

    return build_sequential(
        (16, 16, 3),
        [
            ("conv2d", 8), ("relu",), ("conv2d", 16), ("relu",),
            ("conv2d", 16), ("relu",), ("conv2d", 32), ("relu",),
            ("conv2d", 32), ("relu",), ("flatten",), ("dense", 64),
            ("relu",), ("dense", 32), ("relu",), ("dense", 10),
        ],
    )
