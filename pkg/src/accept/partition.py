"""Optimal chain partitioning of a layered model over an ordered list of nodes.

Layers are numbered 1..L, nodes 0..N-1 (node 0 is the central node).  A plan
is a strictly increasing list of cuts p_1 < ... < p_{N-1}; node i runs layers
p_i + 1 .. p_{i+1} (with p_0 = 0, p_N = L).  Its cost is the largest of

* every node's execution time for its layer range, and
* 2 x the transfer time of layer p_i's output over link i-1 -> i
  (forward activations plus backward gradients).

The DP value A(l, n) is the best such bottleneck for the first l layers on the
first n nodes.  All comparisons use the same precomputed float terms, so the DP,
the brute-force search and plan re-evaluation agree bit for bit.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .codec.blocks import feature_block_nbytes, raw_block_nbytes

FRAME_HEADER_BYTES = 17


@dataclass
class ExecTimeTable:
    """Execution time (ms) of every contiguous layer range on every node.

    ``segments[i, a, b]`` is the time of layers a..b (1-based, inclusive) on
    node i; entries with a > b are unused.
    """

    segments: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.segments.shape[0]

    @property
    def n_layers(self) -> int:
        return self.segments.shape[1] - 1

    def segment(self, node: int, a: int, b: int) -> float:
        return float(self.segments[node, a, b])

    @classmethod
    def from_layer_times(cls, layer_times) -> "ExecTimeTable":
        """Additive table: a range costs the (correctly rounded) sum of its layers."""
        t = np.asarray(layer_times, dtype=np.float64)
        if t.ndim != 2:
            raise ValueError("layer_times must be a (nodes, layers) array")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValueError("layer times must be finite and non-negative")
        n, L = t.shape
        seg = np.zeros((n, L + 1, L + 1))
        for i in range(n):
            for a in range(1, L + 1):
                for b in range(a, L + 1):
                    seg[i, a, b] = math.fsum(t[i, a - 1:b])
        return cls(seg)

    @classmethod
    def from_segment_fn(cls, n_nodes: int, n_layers: int, fn: Callable[[int, int, int], float]) -> "ExecTimeTable":
        seg = np.zeros((n_nodes, n_layers + 1, n_layers + 1))
        for i in range(n_nodes):
            for a in range(1, n_layers + 1):
                for b in range(a, n_layers + 1):
                    v = float(fn(i, a, b))
                    if v < 0 or not math.isfinite(v):
                        raise ValueError(f"segment time for node {i} layers {a}..{b} is {v}")
                    seg[i, a, b] = v
        return cls(seg)

    @classmethod
    def stack(cls, tables: Sequence["ExecTimeTable"]) -> "ExecTimeTable":
        return cls(np.concatenate([t.segments for t in tables], axis=0))


@dataclass
class CommTimeTable:
    """``times[i, j]``: ms to send layer j's output (j = 1..L) from node i to i+1."""

    times: np.ndarray

    @classmethod
    def zeros(cls, n_nodes: int, n_layers: int) -> "CommTimeTable":
        return cls(np.zeros((max(n_nodes - 1, 0), n_layers + 1)))

    def link(self, node: int, layer: int) -> float:
        return float(self.times[node, layer])


@dataclass(frozen=True)
class PartitionPlan:
    cuts: Tuple[int, ...]
    bottleneck_ms: float

    def ranges(self, n_layers: int) -> list[tuple[int, int]]:
        bounds = (0,) + tuple(self.cuts) + (n_layers,)
        return [(bounds[i] + 1, bounds[i + 1]) for i in range(len(bounds) - 1)]

    def to_json(self) -> str:
        return json.dumps({"cuts": list(self.cuts), "bottleneck_ms": self.bottleneck_ms})

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        d = json.loads(text)
        return cls(tuple(int(c) for c in d["cuts"]), float(d["bottleneck_ms"]))


def validate_cuts(cuts: Sequence[int], n_layers: int, n_nodes: int) -> None:
    if len(cuts) != n_nodes - 1:
        raise ValueError(f"{n_nodes} nodes need {n_nodes - 1} cuts, got {len(cuts)}")
    prev = 0
    for c in cuts:
        if not prev < c < n_layers:
            raise ValueError(f"cuts {tuple(cuts)} invalid for {n_layers} layers: each node needs >= 1 layer")
        prev = c


def _check_tables(exec_t: ExecTimeTable, comm: CommTimeTable) -> tuple[int, int]:
    N, L = exec_t.n_nodes, exec_t.n_layers
    if N < 1:
        raise ValueError("need at least one node")
    if L < N:
        raise ValueError(f"{L} layers cannot be split over {N} nodes (every node needs a layer)")
    if N > 1 and comm.times.shape != (N - 1, L + 1):
        raise ValueError(f"comm table shape {comm.times.shape} != {(N - 1, L + 1)}")
    return N, L


def plan_bottleneck(cuts: Sequence[int], exec_t: ExecTimeTable, comm: CommTimeTable) -> float:
    """Largest stage or link term of a given cut list."""
    L = exec_t.n_layers
    bounds = (0,) + tuple(cuts) + (L,)
    terms = []
    for i in range(len(bounds) - 1):
        terms.append(exec_t.segments[i, bounds[i] + 1, bounds[i + 1]])
        if i > 0:
            terms.append(2 * comm.times[i - 1, bounds[i]])
    return float(max(terms))


def dp_table(exec_t: ExecTimeTable, comm: CommTimeTable) -> np.ndarray:
    """A[l, n] for 1 <= n <= N, n <= l <= L (inf elsewhere)."""
    N, L = _check_tables(exec_t, comm)
    seg = exec_t.segments
    A = np.full((L + 1, N + 1), np.inf)
    for l in range(1, L + 1):
        A[l, 1] = seg[0, 1, l]
    for n in range(2, N + 1):
        for l in range(n, L + 1):
            best = np.inf
            for p in range(n - 1, l):
                v = max(A[p, n - 1], 2 * comm.times[n - 2, p], seg[n - 1, p + 1, l])
                if v < best:
                    best = v
            A[l, n] = best
    return A


def dp_optimal_partition(exec_t: ExecTimeTable, comm: CommTimeTable) -> PartitionPlan:
    """Minimum-bottleneck plan; among optimal plans the lexicographically smallest cut list.

    The cut list is rebuilt front to back: a suffix table gives the best
    achievable bottleneck for the remaining nodes, and each cut is the
    smallest one that keeps the optimum A(L, N) reachable.
    """
    N, L = _check_tables(exec_t, comm)
    A = dp_table(exec_t, comm)
    best = float(A[L, N])
    if N == 1:
        return PartitionPlan((), best)
    seg = exec_t.segments
    # S[i, p]: best bottleneck for nodes i..N-1 on layers p+1..L, excluding link i-1 -> i
    S = np.full((N, L + 1), np.inf)
    for p in range(N - 2, L):
        S[N - 1, p] = seg[N - 1, p + 1, L]
    for i in range(N - 2, 0, -1):
        for p in range(i - 1, L - (N - i) + 1):
            v_best = np.inf
            for q in range(p + 1, L - (N - 1 - i) + 1):
                v = max(seg[i, p + 1, q], 2 * comm.times[i, q], S[i + 1, q])
                if v < v_best:
                    v_best = v
            S[i, p] = v_best
    cuts = []
    prev = 0
    for i in range(N - 1):
        for q in range(prev + 1, L - (N - 2 - i)):
            v = max(seg[i, prev + 1, q], 2 * comm.times[i, q], S[i + 1, q])
            if v <= best:
                cuts.append(q)
                prev = q
                break
        else:  # pragma: no cover - unreachable when tables are consistent
            raise RuntimeError("backtracking failed to reach the DP optimum")
    plan = PartitionPlan(tuple(cuts), best)
    assert plan_bottleneck(plan.cuts, exec_t, comm) == best
    return plan


def brute_force_partition(exec_t: ExecTimeTable, comm: CommTimeTable) -> PartitionPlan:
    """Enumerate every cut set (L <= 16, N <= 5); first optimum in lexicographic order."""
    N, L = _check_tables(exec_t, comm)
    if L > 16 or N > 5:
        raise ValueError(f"brute force limited to L <= 16 and N <= 5, got L={L}, N={N}")
    best_cuts: Optional[tuple] = None
    best = np.inf
    for cuts in itertools.combinations(range(1, L), N - 1):
        v = plan_bottleneck(cuts, exec_t, comm)
        if v < best:
            best, best_cuts = v, cuts
    return PartitionPlan(tuple(best_cuts), float(best))


def average_partition(n_layers: int, n_nodes: int) -> tuple[int, ...]:
    """Equal split: cut i at ceil(i * L / N)."""
    if n_layers < n_nodes:
        raise ValueError(f"{n_layers} layers cannot be split over {n_nodes} nodes")
    return tuple(-(-i * n_layers // n_nodes) for i in range(1, n_nodes))


# -- communication cost -----------------------------------------------------


def transfer_time_ms(nbytes: int, bandwidth_bps: float, base_latency_ms: float = 0.0) -> float:
    if not bandwidth_bps > 0:
        raise ValueError("bandwidth must be positive")
    return nbytes * 8 / bandwidth_bps * 1000 + base_latency_ms


def payload_bytes(shape, k: Optional[int], framed: bool = False) -> int:
    """Serialized size of an activation block; ``k=None`` means uncompressed."""
    size = raw_block_nbytes(shape) if k is None else feature_block_nbytes(shape, k)
    return size + (FRAME_HEADER_BYTES if framed else 0)


def comm_time(shape, k: Optional[int], bandwidth_bps: float, base_latency_ms: float = 0.0, framed: bool = False) -> float:
    return transfer_time_ms(payload_bytes(shape, k, framed), bandwidth_bps, base_latency_ms)


def comm_table(
    output_shapes: Sequence[tuple],
    bandwidths_bps: Sequence[float],
    k: Optional[int],
    base_latency_ms: float = 0.0,
    framed: bool = True,
) -> CommTimeTable:
    """T_c for every layer output on every link; ``output_shapes[j-1]`` is layer j's (n, w, h, c)."""
    L = len(output_shapes)
    t = np.zeros((len(bandwidths_bps), L + 1))
    for i, bw in enumerate(bandwidths_bps):
        for j, shape in enumerate(output_shapes, start=1):
            t[i, j] = comm_time(shape, k, bw, base_latency_ms, framed)
    return CommTimeTable(t)


# -- ratio-based baseline estimator -------------------------------------------


def ftpipehd_ratio_estimate(central_layer_times, observed_submodel_time: float, submodel_range: tuple[int, int]) -> np.ndarray:
    """Scale the central node's per-layer times by observed / central time of the same range."""
    t = np.asarray(central_layer_times, dtype=np.float64)
    a, b = submodel_range
    if not 1 <= a <= b <= len(t):
        raise ValueError(f"range {submodel_range} outside 1..{len(t)}")
    if not observed_submodel_time > 0:
        raise ValueError("observed sub-model time must be positive")
    ref = math.fsum(t[a - 1:b])
    if ref <= 0:
        raise ValueError("central-node times for the observed range are zero")
    return t * (observed_submodel_time / ref)
