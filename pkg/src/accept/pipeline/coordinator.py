"""Central-node partition policies.

``RatioCoordinator`` is the baseline: it scales the central node's own
per-layer times by each worker's observed/expected ratio.  ``PredictorCoordinator``
asks the latency predictor for every contiguous range on every worker, checks
reports for drift, and re-profiles plus fine-tunes when a worker changes.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..codec import feature_block_nbytes, gradient_block_nbytes, raw_block_nbytes
from ..latency import (
    RECALIBRATE,
    LatencySample,
    adaptive_update,
    drift_check,
    encode_submodel,
    layer_costs,
    layer_flops,
    select_representative_submodels,
)
from ..partition import (
    CommTimeTable,
    ExecTimeTable,
    dp_optimal_partition,
    ftpipehd_ratio_estimate,
    plan_bottleneck,
)
from ..transport import HEADER_BYTES


def pipeline_comm_table(specs, batch_size: int, link_models, forward_k: Optional[int], backward_k: Optional[int]) -> CommTimeTable:
    """T_c per link and cut layer.  Forward and backward payloads differ in size
    under the codec, so T_c is their mean and 2 * T_c is the round trip."""
    L = len(specs)
    t = np.zeros((len(link_models), L + 1))
    for j, spec in enumerate(specs, start=1):
        shape = (batch_size,) + spec.out_shape
        fwd = raw_block_nbytes(shape) if forward_k is None else feature_block_nbytes(shape, forward_k)
        bwd = raw_block_nbytes(shape) if backward_k is None else gradient_block_nbytes(shape, backward_k)
        for i, link in enumerate(link_models):
            t[i, j] = 0.5 * (link.delivery_ms(fwd + HEADER_BYTES) + link.delivery_ms(bwd + HEADER_BYTES))
    return CommTimeTable(t)


class _PlanningCoordinator:
    needs_profiles = False

    def __init__(self, central_layer_ms: Sequence[float], min_gain: float = 0.05):
        self.central = np.asarray(central_layer_ms, dtype=np.float64)
        self.min_gain = min_gain
        self.decisions: list = []

    def exec_table(self, sim) -> ExecTimeTable:
        raise NotImplementedError

    def comm_table(self, sim) -> CommTimeTable:
        fk, bk = sim.bitwidths(sim.current_epoch)
        return pipeline_comm_table(sim.specs, sim.cfg.batch_size, sim.link_models[: sim.N - 1], fk, bk)

    def plan(self, sim):
        return dp_optimal_partition(self.exec_table(sim), self.comm_table(sim))

    def maybe_repartition(self, sim) -> Optional[tuple]:
        e, c = self.exec_table(sim), self.comm_table(sim)
        best = dp_optimal_partition(e, c)
        current = plan_bottleneck(sim.cuts, e, c)
        take = best.bottleneck_ms < (1.0 - self.min_gain) * current
        self.decisions.append((sim.now, sim.cuts, best.cuts, current, best.bottleneck_ms, take))
        return best.cuts if take else None


class RatioCoordinator(_PlanningCoordinator):
    """Start from the plan that assumes every node runs like the central node;
    once every worker has reported, re-estimate and repartition when the
    estimated bottleneck improves by at least ``min_gain``."""

    def __init__(self, central_layer_ms, n_nodes: int, min_gain: float = 0.05):
        super().__init__(central_layer_ms, min_gain)
        self.n_nodes = n_nodes
        self.estimates: dict = {}
        self._fresh: set = set()

    def initial_cuts(self, sim, profiles) -> tuple:
        return self.plan(sim).cuts

    def exec_table(self, sim) -> ExecTimeTable:
        rows = [self.central] + [self.estimates.get(i, self.central) for i in range(1, self.n_nodes)]
        return ExecTimeTable.from_layer_times(np.stack(rows))

    def on_report(self, sim, rep) -> Optional[tuple]:
        if rep.node == 0:
            return None
        est = ftpipehd_ratio_estimate(self.central, rep.mean_ms, rep.layer_range)
        self.estimates[rep.node] = est
        rep.decision = f"ratio {est.sum() / self.central.sum():.3f}"
        self._fresh.add(rep.node)
        if len(self._fresh) < self.n_nodes - 1:
            return None
        self._fresh.clear()
        return self.maybe_repartition(sim)


class PredictorCoordinator(_PlanningCoordinator):
    """Partition from predicted sub-model times; recalibrate on drift."""

    needs_profiles = True

    def __init__(self, predictor, central_layer_ms, pretrain_samples=(), epsilon: float = 0.2,
                 min_gain: float = 0.05, adapt: bool = True, seed: int = 0, seed_from_profiles: bool = True):
        super().__init__(central_layer_ms, min_gain)
        self.predictor = predictor
        self.pretrain_samples = list(pretrain_samples)
        self.epsilon = epsilon
        self.adapt = adapt
        self.seed = seed
        self.seed_from_profiles = seed_from_profiles
        self.profiles: dict = {}
        self.new_samples: dict = {}
        self.recalibrations: list = []

    def initial_cuts(self, sim, profiles) -> tuple:
        self.profiles = dict(profiles)
        if self.adapt and self.seed_from_profiles:
            for i, prof in self.profiles.items():
                self.new_samples[i] = self._profile_samples(sim, prof)
            self._adapt()
        return self.plan(sim).cuts

    def _profile_samples(self, sim, prof) -> list:
        """Each profile entry is an exact timing of a known sub-model on that worker."""
        if not self.seed_from_profiles:
            return []
        reps = select_representative_submodels(layer_flops(layer_costs(sim.specs, sim.cfg.batch_size)))
        return [LatencySample(r, prof, t) for r, t in zip(reps, prof.times) if t > 0]

    def _adapt(self):
        fresh = [s for v in self.new_samples.values() for s in v]
        self.predictor = adaptive_update(self.predictor, fresh, self.pretrain_samples, seed=self.seed)

    def exec_table(self, sim) -> ExecTimeTable:
        L = len(self.central)
        seg = np.zeros((sim.N, L + 1, L + 1))
        seg[0] = ExecTimeTable.from_layer_times(self.central[None]).segments[0]
        for i in range(1, sim.N):
            seg[i] = self.predictor.segment_times(self.profiles[i])
        return ExecTimeTable(seg)

    def on_report(self, sim, rep) -> Optional[tuple]:
        if rep.node == 0:
            return None
        a, b = rep.layer_range
        enc = encode_submodel(len(self.central), a, b)
        predicted = self.predictor.predict(enc, self.profiles[rep.node])
        rep.decision = drift_check(predicted, rep.mean_ms, self.epsilon)
        if rep.decision != RECALIBRATE:
            return None
        prof = sim.remeasure_profile(rep.node)
        self.profiles[rep.node] = prof
        self.recalibrations.append((sim.now, rep.node, predicted, rep.mean_ms))
        self.new_samples[rep.node] = self._profile_samples(sim, prof) + [LatencySample(enc, prof, rep.mean_ms)]
        if self.adapt:
            self._adapt()
        return self.maybe_repartition(sim)
