"""End-to-end training-time comparisons on simulated heterogeneous nodes.

Four modes differ in two switches: the bit-level codec on the cut tensors and
the partition estimator (ratio baseline or latency predictor).  Runs are dry
(payload sizes are real, numerics skipped) so only the simulated clock matters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .latency import (
    PredictorConfig,
    build_dataset,
    device_configs,
    layer_costs,
    pretrain,
    reference_model_specs,
    unseen_device,
)
from .nn import VersionedWeights
from .nn.layers import build_sequential
from .pipeline import (
    DeviceCost,
    PredictorCoordinator,
    RatioCoordinator,
    RunResult,
    TrainRunConfig,
    run_pipeline,
)

MODES = ("baseline", "blc", "lp", "accept")
MODE_CODEC = {"baseline": "off", "blc": "adaptive", "lp": "off", "accept": "adaptive"}
MODE_PREDICTOR = {"baseline": False, "blc": False, "lp": True, "accept": True}


def comm_heavy_specs():
    """Small spatial CNN: cut tensors are large next to per-layer compute."""
    return reference_model_specs()


def comm_light_specs():
    """Linear-bottleneck blocks (expand, relu, project) on a 4x4 map: four conv
    blocks, then four dense blocks.  Block boundaries carry 512 floats per
    sample against 30-75 MFLOP per block, and the conv half is compute bound
    while the dense half is memory bound, so devices rank the halves differently."""
    conv = [("conv2d", 4096), ("relu",), ("conv2d", 32)]
    dense = [("dense", 16384), ("relu",), ("dense", 512)]
    return build_sequential((4, 4, 32), conv * 4 + [("flatten",)] + dense * 4 + [("dense", 10)])


MODELS = {"comm-heavy": comm_heavy_specs, "comm-light": comm_light_specs}


class DrySource:
    """Batch source for dry runs: only batch/epoch bookkeeping, no tensors."""

    def __init__(self, batches_per_epoch: int):
        self.batches_per_epoch = batches_per_epoch

    def epoch_of(self, b: int) -> int:
        return b // self.batches_per_epoch

    def get(self, b: int):
        return None, None, self.epoch_of(b)


@dataclass(frozen=True)
class Scenario:
    name: str
    devices: tuple  # node 0 is the central node
    slowdowns: tuple = ()


def default_scenarios() -> list[Scenario]:
    """Faster central node with single-core workers; S1's workers are a machine
    the predictor never saw during pre-training."""
    pool = {d.name: d for d in device_configs()}
    gold = unseen_device(cores=1)
    return [
        Scenario("S1", (pool["xeon-2c"], gold, gold)),
        Scenario("S2", (pool["xeon-3c"], pool["kunpeng-1c"], pool["epyc-1c"])),
    ]


@dataclass
class ModeResult:
    scenario: str
    model: str
    bandwidth_bps: float
    mode: str
    total_ms: float
    cuts_history: list
    repartitions: int
    bytes_sent: int
    recalibrations: int = 0


@dataclass
class ExperimentConfig:
    epochs: int = 4
    batches_per_epoch: int = 1000
    batch_size: int = 32
    lr_schedule: tuple = ((0, 0.05), (1, 0.01))
    report_interval: int = 25
    min_gain: float = 0.05
    epsilon: float = 0.2
    seed: int = 0
    predictor: PredictorConfig = field(default_factory=PredictorConfig)


def train_predictor_for(specs, batch_size: int, exclude: Sequence[str] = (), seed: int = 0,
                        config: Optional[PredictorConfig] = None):
    """Pre-train a predictor for ``specs`` on every synthetic configuration not in ``exclude``."""
    costs = layer_costs(specs, batch_size)
    devices = [d for d in device_configs() if d.name not in set(exclude)]
    data = build_dataset(devices, costs, seed)
    model, _ = pretrain(data, config or PredictorConfig(seed=seed))
    return model, data


def shape_only_weights(specs) -> VersionedWeights:
    """Zero parameters of the right shapes: dry runs only need checkpoint sizes."""
    return VersionedWeights(0, tuple({k: np.zeros(v, np.float32) for k, v in s.param_shapes.items()} for s in specs))


def run_mode(mode: str, specs, scenario: Scenario, bandwidth_bps: float, cfg: ExperimentConfig,
             predictor=None, pretrain_samples=(), model: str = "") -> ModeResult:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    n = len(scenario.devices)
    cost = DeviceCost(scenario.devices, specs, cfg.batch_size, seed=cfg.seed, slowdowns=scenario.slowdowns)
    central = cost.layer_ms[0]  # the central node times its own layers directly
    if MODE_PREDICTOR[mode]:
        if predictor is None:
            raise ValueError(f"mode {mode!r} needs a trained predictor")
        coord = PredictorCoordinator(predictor, central, pretrain_samples, epsilon=cfg.epsilon,
                                     min_gain=cfg.min_gain, seed=cfg.seed)
    else:
        coord = RatioCoordinator(central, n, min_gain=cfg.min_gain)
    run_cfg = TrainRunConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr_schedule=cfg.lr_schedule,
        report_interval=cfg.report_interval, codec_mode=MODE_CODEC[mode], bandwidth_bps=bandwidth_bps,
        seed=cfg.seed, compute=False,
    )
    r: RunResult = run_pipeline(specs, shape_only_weights(specs), cost, DrySource(cfg.batches_per_epoch), run_cfg, n, coordinator=coord)
    return ModeResult(
        scenario.name, model, bandwidth_bps, mode, r.makespan_ms, [c for _, c in r.cuts_history],
        len(r.cuts_history) - 1, r.bytes_sent, len(getattr(coord, "recalibrations", ())),
    )

