"""Minimal numpy tensors, layers, reverse-mode gradients and SGD."""
from .layers import LayerSpec, build_sequential, check_composes, init_params, mlp
from .losses import mean_squared_error, softmax_cross_entropy
from .model import Tape, TapeConsumedError, forward, predict_classes, ste_grad
from .weights import (
    NonFiniteGradientError,
    VersionedWeights,
    checkpoint_bytes,
    checkpoint_nbytes,
    init_weights,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    weights_from_checkpoint,
)

__all__ = [
    "LayerSpec",
    "NonFiniteGradientError",
    "Tape",
    "TapeConsumedError",
    "VersionedWeights",
    "build_sequential",
    "check_composes",
    "checkpoint_bytes",
    "checkpoint_nbytes",
    "forward",
    "init_params",
    "init_weights",
    "load_checkpoint",
    "mean_squared_error",
    "mlp",
    "predict_classes",
    "save_checkpoint",
    "sgd_step",
    "softmax_cross_entropy",
    "ste_grad",
    "weights_from_checkpoint",
]
