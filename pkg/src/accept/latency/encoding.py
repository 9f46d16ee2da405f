"""Sub-model encodings and the ten representative sub-models of a layered model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SubModelEncoding:
    """Presence bit per layer of one contiguous layer range (1-based, inclusive)."""

    n_layers: int
    start: int
    end: int

    def __post_init__(self):
        if not 1 <= self.start <= self.end <= self.n_layers:
            raise ValueError(f"sub-model {self.start}..{self.end} outside layers 1..{self.n_layers}")

    @property
    def bits(self) -> np.ndarray:
        b = np.zeros(self.n_layers, dtype=np.float32)
        b[self.start - 1:self.end] = 1.0
        return b

    def to_string(self) -> str:
        return "".join("1" if v else "0" for v in self.bits)

    @classmethod
    def from_bits(cls, bits) -> "SubModelEncoding":
        if isinstance(bits, str):
            bits = [int(ch) for ch in bits]
        b = np.asarray(bits).astype(int)
        if b.ndim != 1 or not np.all((b == 0) | (b == 1)):
            raise ValueError("encoding must be a 0/1 vector")
        idx = np.flatnonzero(b)
        if idx.size == 0 or idx[-1] - idx[0] + 1 != idx.size:
            raise ValueError(f"set bits must form one contiguous run, got {b.tolist()}")
        return cls(len(b), int(idx[0]) + 1, int(idx[-1]) + 1)


def encode_submodel(n_layers: int, start: int, end: int) -> SubModelEncoding:
    return SubModelEncoding(n_layers, start, end)


def all_submodels(n_layers: int) -> list[SubModelEncoding]:
    return [SubModelEncoding(n_layers, a, b) for a in range(1, n_layers + 1) for b in range(a, n_layers + 1)]


def submodel_flops(layer_flops: Sequence[float], enc: SubModelEncoding) -> float:
    return float(np.sum(np.asarray(layer_flops, dtype=np.float64)[enc.start - 1:enc.end]))


def representative_indices(M: int) -> list[int]:
    if M < 10:
        raise ValueError(f"need at least 10 sub-models, got {M}")
    return [k * (M - 1) // 9 for k in range(10)]


def select_representative_submodels(layer_flops: Sequence[float]) -> list[SubModelEncoding]:
    """Ten sub-models evenly spaced (by sorted index) over ascending total flops.

    Ties in flops are broken by (start, end).
    """
    L = len(layer_flops)
    if L < 4:
        raise ValueError(f"need at least 4 layers for 10 sub-models, got {L}")
    subs = all_submodels(L)
    order = sorted(subs, key=lambda s: (submodel_flops(layer_flops, s), s.start, s.end))
    return [order[i] for i in representative_indices(len(order))]
