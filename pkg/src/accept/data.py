"""Seeded synthetic classification data and a per-epoch shuffled batch source."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def two_class_xor(n: int = 2000, dim: int = 16, seed: int = 0, spread: float = 0.45, test_frac: float = 0.25) -> Dataset:
    """Two classes, each a pair of Gaussian blobs at opposite XOR corners of the
    first two coordinates; the remaining coordinates are pure noise.  Not
    linearly separable, so the hidden layers matter."""
    rng = np.random.default_rng(seed)
    corners = np.array([[1, 1], [-1, -1], [1, -1], [-1, 1]], dtype=np.float64)
    which = rng.integers(0, 4, size=n)
    y = (which >= 2).astype(np.int64)
    x = rng.normal(0.0, 1.0, size=(n, dim))
    x[:, :2] = corners[which] + rng.normal(0.0, spread, size=(n, 2))
    x = x.astype(np.float32)
    n_test = int(round(n * test_frac))
    return Dataset(x[n_test:], y[n_test:], x[:n_test], y[:n_test])


def as_input(x: np.ndarray, in_shape) -> np.ndarray:
    return x.reshape((len(x),) + tuple(in_shape))


class BatchSource:
    """Batch b belongs to epoch b // batches_per_epoch; each epoch has its own
    seeded permutation and the trailing partial batch is dropped."""

    def __init__(self, x: np.ndarray, y: np.ndarray, batch_size: int, seed: int = 0, in_shape=None):
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if len(x) < batch_size:
            raise ValueError(f"{len(x)} samples cannot fill a batch of {batch_size}")
        self.x, self.y = x, y
        self.batch_size = batch_size
        self.seed = seed
        self.in_shape = tuple(in_shape) if in_shape is not None else (1, 1, x.shape[1])
        self.batches_per_epoch = len(x) // batch_size
        self._perm_cache: dict = {}

    def epoch_of(self, b: int) -> int:
        return b // self.batches_per_epoch

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perm_cache:
            self._perm_cache = {epoch: np.random.default_rng((self.seed, epoch)).permutation(len(self.x))}
        return self._perm_cache[epoch]

    def get(self, b: int):
        e = self.epoch_of(b)
        i = b % self.batches_per_epoch
        idx = self._perm(e)[i * self.batch_size:(i + 1) * self.batch_size]
        return as_input(self.x[idx], self.in_shape), self.y[idx], e


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))
