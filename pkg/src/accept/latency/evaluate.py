"""Accuracy studies for the latency predictor on the synthetic generator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .predictor import FlopLinearBaseline, PredictorConfig, accuracy_within, adaptive_update, pretrain, samples_to_arrays
from .synthetic import LatencySample, SyntheticDevice, device_samples, layer_flops

DHAT_SIZES = tuple(range(2, 15))


@dataclass(frozen=True)
class HeldOutResult:
    device: str
    accuracy: float  # fraction of sub-models within tol, predictor
    flop_accuracy: float  # same for the flop-linear baseline
    n_samples: int


def flop_baseline_accuracy(costs, samples: Sequence[LatencySample], tol: float) -> float:
    """Flop-linear baseline fitted to the device's own representative profile."""
    lf = layer_flops(costs)
    base = FlopLinearBaseline.from_profile(lf, samples[0].profile)
    _, _, t = samples_to_arrays(samples)
    flops = [lf[s.encoding.start - 1:s.encoding.end].sum() for s in samples]
    return accuracy_within(base.predict(flops), t, tol)


def leave_one_device_out(devices: Sequence[SyntheticDevice], costs, seed: int = 0, tol: float = 0.10,
                         config: Optional[PredictorConfig] = None) -> list[HeldOutResult]:
    """Pre-train on every configuration but one, score the one left out."""
    rng = np.random.default_rng(seed)
    per = {d.name: device_samples(d, costs, rng) for d in devices}
    cfg = config or PredictorConfig(seed=seed)
    out = []
    for d in devices:
        train = [s for name, S in per.items() if name != d.name for s in S]
        model, _ = pretrain(train, cfg)
        E, P, t = samples_to_arrays(per[d.name])
        out.append(HeldOutResult(d.name, accuracy_within(model.predict_batch(E, P), t, tol),
                                 flop_baseline_accuracy(costs, per[d.name], tol), len(t)))
    return out


def dhat_sweep(model, pretrain_samples: Sequence[LatencySample], devices: Sequence[SyntheticDevice], costs,
               sizes: Sequence[int] = DHAT_SIZES, repeats: int = 5, tol: float = 0.10, seed: int = 0) -> dict:
    """Accuracy on a new device after fine-tuning on |D̂| of its samples.

    For each device and repeat, one random order of the device's sub-models is
    drawn; D̂ is a prefix of it and the test set is everything past the largest
    size, so every |D̂| is scored on the same sub-models.  Key 0 is the model
    before any update.  Returns ``{size: [accuracy per (device, repeat)]}``.
    """
    sizes = sorted(set(sizes))
    out: dict = {0: []}
    out.update({n: [] for n in sizes})
    rng = np.random.default_rng(seed)
    for d in devices:
        S = device_samples(d, costs, rng)
        if len(S) <= sizes[-1]:
            raise ValueError(f"device {d.name} has {len(S)} sub-models, need more than {sizes[-1]}")
        for rep in range(repeats):
            order = [S[i] for i in rng.permutation(len(S))]
            E, P, t = samples_to_arrays(order[sizes[-1]:])
            out[0].append(accuracy_within(model.predict_batch(E, P), t, tol))
            for n in sizes:
                updated = adaptive_update(model, order[:n], pretrain_samples, seed=seed + rep)
                out[n].append(accuracy_within(updated.predict_batch(E, P), t, tol))
    return out
