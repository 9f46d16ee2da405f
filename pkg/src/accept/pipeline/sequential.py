"""Plain single-process trainer used as the reference for the pipeline."""
from __future__ import annotations

from ..codec.schedule import lr_at_epoch
from ..nn import VersionedWeights, forward, sgd_step, softmax_cross_entropy


def train_sequential(specs, weights: VersionedWeights, data, epochs: int, lr_schedule, max_batches: int | None = None):
    """SGD over ``data`` batches in order; returns (weights, per-batch losses, weight history)."""
    total = data.batches_per_epoch * epochs
    if max_batches is not None:
        total = min(total, max_batches)
    losses, history = [], [weights]
    for b in range(total):
        x, labels, epoch = data.get(b)
        y, tape = forward(specs, weights, x)
        loss, grad = softmax_cross_entropy(y, labels)
        grads, _ = tape.backward(grad)
        weights = sgd_step(weights, grads, lr_at_epoch(lr_schedule, epoch))
        losses.append(loss)
        history.append(weights)
    return weights, losses, history
