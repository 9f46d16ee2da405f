"""Per-stage state for 1F1B pipeline training with weight stashing.

Stage s of N may hold at most N - s batches between their forward and
backward passes.  Its op sequence is fixed: forwards until that many are in
flight, then strictly alternating backward/forward, then backwards only once
no further forwards are due.  The weights used by a batch's forward pass are
kept in a stash keyed by version until that batch's backward pass is done.
"""
from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..nn import LayerSpec, Tape, VersionedWeights, forward, sgd_step

FORWARD, BACKWARD, WAIT = "forward", "backward", "wait"


class StashError(RuntimeError):
    """A weight-stash invariant was broken; the run cannot continue safely."""


@dataclass(frozen=True)
class BatchTicket:
    batch_id: int
    version: int
    direction: str


@dataclass
class StageState:
    node_id: int
    n_stages: int
    layer_range: tuple  # (a, b), 1-based inclusive
    specs: list
    weights: VersionedWeights
    max_in_flight: Optional[int] = None  # None: 1F1B depth N - s
    forward_quota: int = 0  # forwards this stage may run before it must drain
    fwd_queue: deque = field(default_factory=deque)  # (batch_id, input)
    bwd_queue: dict = field(default_factory=dict)  # batch_id -> grad
    stash: dict = field(default_factory=dict)  # version -> VersionedWeights
    stash_refs: Counter = field(default_factory=Counter)
    in_flight: dict = field(default_factory=dict)  # batch_id -> (ticket, tape)
    fwd_order: deque = field(default_factory=deque)  # forwarded batch ids awaiting backward, oldest first
    forwards: int = 0
    backwards: int = 0
    trace: list = field(default_factory=list)
    max_stash_seen: int = 0

    @property
    def limit(self) -> int:
        depth = self.n_stages - self.node_id
        return depth if self.max_in_flight is None else min(depth, self.max_in_flight)

    @property
    def stash_bound(self) -> int:
        return self.n_stages - self.node_id  # downstream stages + 1

    @property
    def drained(self) -> bool:
        return not self.in_flight and self.forwards == self.forward_quota


def schedule_next(stage: StageState) -> tuple[str, Optional[int]]:
    """Next action under strict 1F1B gating: (FORWARD | BACKWARD | WAIT, batch_id)."""
    if stage.forwards - stage.backwards < stage.limit and stage.forwards < stage.forward_quota:
        if stage.fwd_queue:
            return FORWARD, stage.fwd_queue[0][0]
        return WAIT, None
    if stage.fwd_order:
        oldest = stage.fwd_order[0]
        if oldest in stage.bwd_queue:
            return BACKWARD, oldest
    return WAIT, None


def _stash_put(stage: StageState, w: VersionedWeights) -> None:
    if w.version not in stage.stash:
        if len(stage.stash) >= stage.stash_bound:
            raise StashError(
                f"stage {stage.node_id}: stash would hold {len(stage.stash) + 1} versions, bound is {stage.stash_bound}"
            )
        stage.stash[w.version] = w
    stage.stash_refs[w.version] += 1
    stage.max_stash_seen = max(stage.max_stash_seen, len(stage.stash))


def _stash_release(stage: StageState, version: int) -> VersionedWeights:
    if version not in stage.stash:
        raise StashError(f"stage {stage.node_id}: no stashed weights for version {version}")
    w = stage.stash[version]
    stage.stash_refs[version] -= 1
    if stage.stash_refs[version] == 0:
        del stage.stash[version]
        del stage.stash_refs[version]
    return w


def stash_and_forward(stage: StageState, batch_id: int, x: Optional[np.ndarray], compute: bool = True):
    """Forward ``batch_id`` with the current weights, stashing them.

    Returns (ticket, output); output is None when ``compute`` is False.
    """
    if not stage.fwd_queue or stage.fwd_queue[0][0] != batch_id:
        raise RuntimeError(f"stage {stage.node_id}: batch {batch_id} is not next in the forward queue")
    stage.fwd_queue.popleft()
    w = stage.weights
    _stash_put(stage, w)
    ticket = BatchTicket(batch_id, w.version, FORWARD)
    tape = None
    y = None
    if compute:
        y, tape = forward(stage.specs, w, x)
    stage.in_flight[batch_id] = (ticket, tape)
    stage.fwd_order.append(batch_id)
    stage.forwards += 1
    stage.trace.append(ticket)
    return ticket, y


def backward_with_stash(stage: StageState, batch_id: int, lr: float, compute: bool = True):
    """Backward ``batch_id`` through the weights stashed at its forward pass,
    then apply an SGD step to the current weights.

    Returns (ticket, input gradient or None).
    """
    if batch_id not in stage.in_flight:
        raise StashError(f"stage {stage.node_id}: backward for batch {batch_id} without a forward")
    grad = stage.bwd_queue.pop(batch_id)
    fticket, tape = stage.in_flight.pop(batch_id)
    stage.fwd_order.remove(batch_id)
    stashed = _stash_release(stage, fticket.version)
    ticket = BatchTicket(batch_id, stashed.version, BACKWARD)
    if ticket.version != fticket.version:
        raise StashError(f"stage {stage.node_id}: batch {batch_id} forward v{fticket.version} backward v{ticket.version}")
    dx = None
    if compute:
        if tape.version != stashed.version:
            raise StashError(f"stage {stage.node_id}: tape version {tape.version} != stash {stashed.version}")
        grads, dx = tape.backward(grad)
        stage.weights = sgd_step(stage.weights, grads, lr)
    else:
        stage.weights = VersionedWeights(stage.weights.version + 1, stage.weights.params)
    stage.backwards += 1
    stage.trace.append(ticket)
    return ticket, dx


def audit_trace(trace: Sequence[BatchTicket]) -> list[str]:
    """Every batch's backward version must equal its forward version."""
    fwd: dict = {}
    problems = []
    for t in trace:
        if t.direction == FORWARD:
            fwd[t.batch_id] = t.version
        elif fwd.get(t.batch_id) != t.version:
            problems.append(f"batch {t.batch_id}: forward v{fwd.get(t.batch_id)} backward v{t.version}")
    return problems


def expected_forward_version(batch_index: int, stage: int, n_stages: int) -> int:
    """Weight version used by the forward of the ``batch_index``-th batch since the
    last drain, under strict 1F1B (versions counted from that drain)."""
    return max(0, batch_index - (n_stages - stage) + 1)
