"""Dual-stream latency regressor f(s, h).

Stream one reads the sub-model encoding through two dense layers; its output
is concatenated with the (normalized) hardware profile and read by two more
dense layers that emit the log execution time.

Profiles enter as log times centred on their own mean, and that mean is added
back to the output.  The network therefore sees only the shape of a profile,
and a device that is uniformly k times slower gets exactly k times the
predictions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..nn import VersionedWeights, build_sequential, forward, init_weights
from ..nn.weights import checkpoint_bytes, weights_from_checkpoint
from .encoding import SubModelEncoding, all_submodels, select_representative_submodels
from .synthetic import HardwareProfile, LatencySample

PROFILE_DIM = 10
STABLE, RECALIBRATE = "stable", "recalibrate"


class UntrainedPredictorError(RuntimeError):
    pass


class PredictorDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    encoder_widths: tuple = (32, 16)
    head_width: int = 32
    lr: float = 1e-2
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0
    epsilon: float = 0.2
    lr_decay: bool = True
    finetune_steps: int = 300
    finetune_lr: float = 1e-3


def _stream_specs(n_layers: int, cfg: PredictorConfig):
    w1, w2 = cfg.encoder_widths
    enc = build_sequential((1, 1, n_layers), [("dense", w1), ("relu",), ("dense", w2), ("relu",)])
    head = build_sequential((1, 1, w2 + PROFILE_DIM), [("dense", cfg.head_width), ("relu",), ("dense", 1)])
    return enc, head


@dataclass(frozen=True)
class LatencyPredictor:
    """Immutable snapshot: weights plus the input/target normalization."""

    n_layers: int
    config: PredictorConfig
    weights: Optional[VersionedWeights] = None
    x_mean: Optional[np.ndarray] = None
    x_std: Optional[np.ndarray] = None
    y_mean: float = 0.0
    y_std: float = 1.0

    @property
    def trained(self) -> bool:
        return self.weights is not None

    @property
    def specs(self):
        return _stream_specs(self.n_layers, self.config)

    def _split(self, weights=None):
        w = weights or self.weights
        n_enc = len(self.specs[0])
        return w.slice(0, n_enc), w.slice(n_enc, len(w))

    def normalize_profiles(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(network profile input, per-row log scale)."""
        shape, scale = _log_shape(P)
        return (shape - self.x_mean) / self.x_std, scale

    def normalize_targets(self, t: np.ndarray, scale: np.ndarray) -> np.ndarray:
        return (np.log(t) - scale - self.y_mean) / self.y_std

    def _forward(self, weights, E, Pn):
        enc_specs, head_specs = self.specs
        we, wh = self._split(weights)
        z, tape_e = forward(enc_specs, we, E[:, None, None, :].astype(np.float32))
        h_in = np.concatenate([z, Pn[:, None, None, :].astype(np.float32)], axis=3)
        out, tape_h = forward(head_specs, wh, h_in)
        return out[:, 0, 0, 0], tape_e, tape_h

    def predict_batch(self, encodings: np.ndarray, profiles: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise UntrainedPredictorError("predictor has not been trained")
        E = np.atleast_2d(np.asarray(encodings, dtype=np.float32))
        P = np.atleast_2d(np.asarray(profiles, dtype=np.float64))
        if E.shape[1] != self.n_layers or P.shape[1] != PROFILE_DIM or len(E) != len(P):
            raise ValueError(f"expected ({self.n_layers}, {PROFILE_DIM})-wide inputs, got {E.shape} and {P.shape}")
        Pn, scale = self.normalize_profiles(P)
        y, _, _ = self._forward(self.weights, E, Pn)
        return np.exp(y.astype(np.float64) * self.y_std + self.y_mean + scale)

    def predict(self, encoding: SubModelEncoding, profile: HardwareProfile) -> float:
        return float(self.predict_batch(encoding.bits[None], profile.as_array()[None])[0])

    def segment_times(self, profile: HardwareProfile) -> np.ndarray:
        """Predicted time of every contiguous range: ``T[a, b]`` for 1 <= a <= b <= L."""
        L = self.n_layers
        subs = all_submodels(L)
        pred = self.predict_batch(np.stack([s.bits for s in subs]), np.tile(profile.as_array(), (len(subs), 1)))
        T = np.zeros((L + 1, L + 1))
        for s, t in zip(subs, pred):
            T[s.start, s.end] = t
        return T


def _log_shape(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logP = np.log(np.maximum(P, 1e-9))
    scale = logP.mean(axis=1)
    return logP - scale[:, None], scale


def samples_to_arrays(samples: Sequence[LatencySample]):
    E = np.stack([s.encoding.bits for s in samples]).astype(np.float32)
    P = np.stack([s.profile.as_array() for s in samples])
    t = np.array([s.time_ms for s in samples], dtype=np.float64)
    return E, P, t


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8, total_steps=None):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.total = total_steps
        self.m = self.v = None
        self.t = 0

    def step(self, params: list, grads: list) -> list:
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        lr = self.lr
        if self.total:  # cosine decay to 5% of the initial rate
            lr *= 0.05 + 0.95 * 0.5 * (1 + np.cos(np.pi * min(self.t / self.total, 1.0)))
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append((p - lr * mh / (np.sqrt(vh) + self.eps)).astype(p.dtype))
        return out


def _flat(weights: VersionedWeights):
    keys = [(i, k) for i, p in enumerate(weights.params) for k in sorted(p)]
    return keys, [weights.params[i][k] for i, k in keys]


def _unflat(weights: VersionedWeights, keys, arrays, version) -> VersionedWeights:
    params = [dict(p) for p in weights.params]
    for (i, k), a in zip(keys, arrays):
        params[i][k] = a
    return VersionedWeights(version, tuple(params))


def _loss_and_grads(model: LatencyPredictor, weights, E, Pn, yn):
    pred, tape_e, tape_h = model._forward(weights, E, Pn)
    diff = pred.astype(np.float64) - yn
    loss = float(np.mean(diff**2))
    dout = (2 * diff / len(yn)).astype(np.float32)[:, None, None, None]
    gh, dh_in = tape_h.backward(dout)
    w2 = model.config.encoder_widths[1]
    ge, _ = tape_e.backward(dh_in[..., :w2])
    grads = list(ge) + list(gh)
    return loss, grads


def _train(model: LatencyPredictor, weights, E, Pn, yn, steps_fn, lr, rng, what: str, total_steps=None):
    opt = _Adam(lr, total_steps=total_steps)
    keys, arrays = _flat(weights)
    losses = []
    for idx in steps_fn(rng):
        w = _unflat(weights, keys, arrays, weights.version)
        loss, grads = _loss_and_grads(model, w, E[idx], Pn[idx], yn[idx])
        if not np.isfinite(loss):
            raise PredictorDivergedError(f"{what} diverged (loss {loss}) with seed={model.config.seed}, config={model.config}")
        losses.append(loss)
        garr = [grads[i][k] for i, k in keys]
        arrays = opt.step(arrays, garr)
    return _unflat(weights, keys, arrays, weights.version + 1), losses


def pretrain(samples: Sequence[LatencySample], config: PredictorConfig = PredictorConfig()) -> tuple[LatencyPredictor, list]:
    """Fit from scratch; returns the model and the per-epoch mean training loss."""
    if not samples:
        raise ValueError("cannot pretrain on an empty dataset")
    # canonical order, so the result depends on the seed and not on how the dataset was listed
    samples = sorted(samples, key=lambda s: (s.profile.times, s.encoding.start, s.encoding.end, s.time_ms))
    E, P, t = samples_to_arrays(samples)
    L = E.shape[1]
    shape, scale = _log_shape(P)
    x_mean, x_std = shape.mean(axis=0), shape.std(axis=0)
    x_std = np.where(x_std > 1e-8, x_std, 1.0)
    logt = np.log(t) - scale
    y_mean, y_std = float(logt.mean()), float(logt.std()) or 1.0
    model = LatencyPredictor(L, config, None, x_mean, x_std, y_mean, y_std)
    enc, head = model.specs
    weights = VersionedWeights.concat([init_weights(enc, config.seed), init_weights(head, config.seed + 1)], version=0)
    Pn = (shape - x_mean) / x_std
    yn = (logt - y_mean) / y_std
    n = len(samples)
    bs = min(config.batch_size, n)
    epoch_losses: list = []

    def batches(rng):
        for _ in range(config.epochs):
            perm = rng.permutation(n)
            for s in range(0, n, bs):
                yield perm[s:s + bs]

    weights, losses = _train(
        model, weights, E, Pn, yn, batches, config.lr, np.random.default_rng(config.seed), "pretraining",
        total_steps=config.epochs * -(-n // bs) if config.lr_decay else None,
    )
    per_epoch = -(-n // bs)
    epoch_losses = [float(np.mean(losses[i:i + per_epoch])) for i in range(0, len(losses), per_epoch)]
    return replace(model, weights=weights), epoch_losses


def adaptive_update(
    model: LatencyPredictor,
    new_samples: Sequence[LatencySample],
    pretrain_samples: Sequence[LatencySample],
    seed: int = 0,
) -> LatencyPredictor:
    """Fine-tune on D ∪ D̂.  Every minibatch holds all of D̂ plus a random slice of D,
    so a handful of new samples is not drowned out by the pre-training set."""
    if not new_samples:
        return model
    if not model.trained:
        raise UntrainedPredictorError("adaptive update needs a trained predictor")
    cfg = model.config
    En, Pnew, tn = samples_to_arrays(new_samples)
    if pretrain_samples:
        Ed, Pd, td = samples_to_arrays(pretrain_samples)
        E, P, t = np.concatenate([En, Ed]), np.concatenate([Pnew, Pd]), np.concatenate([tn, td])
    else:
        E, P, t = En, Pnew, tn
    Pn, scale = model.normalize_profiles(P)
    yn = model.normalize_targets(t, scale)
    k, nd = len(new_samples), len(E) - len(new_samples)
    fill = max(cfg.batch_size - k, 0)

    def batches(rng):
        new_idx = np.arange(k)
        for _ in range(cfg.finetune_steps):
            if nd and fill:
                yield np.concatenate([new_idx, k + rng.choice(nd, size=min(fill, nd), replace=False)])
            else:
                yield new_idx

    weights, _ = _train(model, model.weights, E, Pn, yn, batches, cfg.finetune_lr, np.random.default_rng(seed), "adaptive update")
    return replace(model, weights=weights)


def drift_check(predicted: float, reported: float, epsilon: float = 0.2) -> str:
    """``recalibrate`` iff |reported - predicted| / reported > epsilon."""
    if not reported > 0:
        raise ValueError(f"reported time must be positive, got {reported}")
    return RECALIBRATE if abs(reported - predicted) / reported > epsilon else STABLE


def accuracy_within(pred, true, tol: float) -> float:
    pred, true = np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)
    return float(np.mean(np.abs(pred - true) <= tol * true))


@dataclass(frozen=True)
class FlopLinearBaseline:
    """time = slope * flops, slope fitted by least squares through the origin."""

    slope: float

    @classmethod
    def fit(cls, flops, times) -> "FlopLinearBaseline":
        f, t = np.asarray(flops, dtype=np.float64), np.asarray(times, dtype=np.float64)
        denom = float(f @ f)
        if denom == 0:
            raise ValueError("cannot fit a flops slope to zero-flop sub-models")
        return cls(float(f @ t) / denom)

    @classmethod
    def from_profile(cls, layer_flops, profile: HardwareProfile) -> "FlopLinearBaseline":
        reps = select_representative_submodels(layer_flops)
        lf = np.asarray(layer_flops, dtype=np.float64)
        return cls.fit([lf[r.start - 1:r.end].sum() for r in reps], profile.as_array())

    def predict(self, flops) -> np.ndarray:
        return self.slope * np.asarray(flops, dtype=np.float64)


# -- persistence ---------------------------------------------------------------


def save_dataset_csv(samples: Sequence[LatencySample], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["encoding_bits"] + [f"profile_{i}" for i in range(PROFILE_DIM)] + ["time_ms"])
        for s in samples:
            w.writerow([s.encoding.to_string()] + [repr(float(v)) for v in s.profile.times] + [repr(float(s.time_ms))])


def load_dataset_csv(path) -> list[LatencySample]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            enc = SubModelEncoding.from_bits(row["encoding_bits"])
            prof = HardwareProfile(tuple(float(row[f"profile_{i}"]) for i in range(PROFILE_DIM)))
            out.append(LatencySample(enc, prof, float(row["time_ms"])))
    return out


# The checkpoint reuses the nn-core layout; one trailing record holds the
# normalization as W = [x_mean; x_std] (2 x 10) and b = [y_mean, y_std].


def predictor_checkpoint_bytes(model: LatencyPredictor) -> bytes:
    if not model.trained:
        raise UntrainedPredictorError("nothing to save: predictor has not been trained")
    norm = {
        "W": np.stack([model.x_mean, model.x_std]).astype(np.float32),
        "b": np.array([model.y_mean, model.y_std], dtype=np.float32),
    }
    return checkpoint_bytes(VersionedWeights(model.weights.version, tuple(model.weights.params) + (norm,)))


def predictor_from_checkpoint(data: bytes, n_layers: int, config: PredictorConfig = PredictorConfig()) -> LatencyPredictor:
    w = weights_from_checkpoint(data)
    *params, norm = w.params
    enc, head = _stream_specs(n_layers, config)
    if len(params) != len(enc) + len(head):
        raise ValueError(f"checkpoint has {len(params)} layers, predictor expects {len(enc) + len(head)}")
    W0 = params[0].get("W")
    if W0 is None or W0.shape[0] != n_layers:
        raise ValueError(f"checkpoint encoder input width does not match {n_layers} layers")
    return LatencyPredictor(
        n_layers, config, VersionedWeights(0, tuple(params)),
        norm["W"][0].astype(np.float64), norm["W"][1].astype(np.float64),
        float(norm["b"][0]), float(norm["b"][1]),
    )


def save_predictor(model: LatencyPredictor, path) -> None:
    Path(path).write_bytes(predictor_checkpoint_bytes(model))


def load_predictor(path, n_layers: int, config: PredictorConfig = PredictorConfig()) -> LatencyPredictor:
    return predictor_from_checkpoint(Path(path).read_bytes(), n_layers, config)
