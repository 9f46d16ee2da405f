"""Discrete-event simulation of 1F1B pipeline training over simulated links.

Numerics are real (numpy forward/backward, real codec blocks, real wire
frames); time is simulated.  Each stage op costs what the cost model says,
each message occupies its link for bytes * 8 / bandwidth, and one loop owns
the clock.  Stage 0 is the central node: it owns the data, ships labels to
the last stage alongside the batch ticket, and runs the coordinator that may
repartition the model between batches (drain first, then move weights).
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..codec import (
    MbqState,
    RawBlock,
    compress_gradients,
    decode_block,
    deserialize_block,
    feature_block_nbytes,
    forward_quantize,
    gradient_block_nbytes,
    raw_block_nbytes,
    serialize_block,
)
from ..codec.schedule import CODEC_MODES, bitwidths_for_epoch, lr_at_epoch
from ..nn import VersionedWeights, softmax_cross_entropy
from ..nn.weights import checkpoint_bytes, checkpoint_nbytes
from ..partition import validate_cuts
from ..transport import LinkModel, MsgType, SimulatedLink, WireMessage
from .stage import BACKWARD, FORWARD, WAIT, StageState, backward_with_stash, schedule_next, stash_and_forward


class PipelineDeadlock(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 1
    batch_size: int = 32
    lr_schedule: tuple = ((0, 0.05),)
    report_interval: int = 50
    codec_mode: str = "off"
    fixed_k: int = 2
    bandwidth_bps: float = 1e9
    base_latency_ms: float = 0.0
    seed: int = 0
    max_in_flight: Optional[int] = None
    compute: bool = True
    max_batches: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.report_interval < 1:
            raise ValueError("report interval must be >= 1")
        if self.codec_mode not in CODEC_MODES:
            raise ValueError(f"codec mode must be one of {CODEC_MODES}")
        if self.max_in_flight is not None and self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass
class LatencyReport:
    node: int
    layer_range: tuple
    mean_ms: float
    count: int
    time_ms: float
    decision: str = ""


@dataclass
class RunResult:
    makespan_ms: float
    metrics: list
    weights: VersionedWeights
    cuts_history: list
    traces: list  # (node, segment index, [BatchTicket...])
    reports: list
    stash_peaks: list
    bytes_sent: int
    total_batches: int

    def losses(self) -> np.ndarray:
        return np.array([row["loss"] for row in self.metrics], dtype=np.float64)


@dataclass
class _BatchInfo:
    epoch: int
    fwd_ms: list
    bwd_ms: list
    comm_bytes: int = 0
    comm_ms: float = 0.0
    loss: float = float("nan")
    forward_k: int = 32
    backward_k: int = 32


class StaticCoordinator:
    """Keeps the initial cuts for the whole run."""

    needs_profiles = False

    def __init__(self, cuts: Sequence[int]):
        self.cuts = tuple(cuts)

    def initial_cuts(self, sim, profiles) -> tuple:
        return self.cuts

    def on_report(self, sim, report: LatencyReport) -> Optional[tuple]:
        return None


class PipelineSimulator:
    def __init__(self, specs, weights: VersionedWeights, cost, data, config: TrainRunConfig,
                 n_nodes: int, coordinator=None, cuts: Sequence[int] | None = None):
        self.specs = list(specs)
        self.L = len(self.specs)
        self.N = n_nodes
        if coordinator is None:
            if cuts is None:
                raise ValueError("give either cuts or a coordinator")
            coordinator = StaticCoordinator(cuts)
        self.coordinator = coordinator
        self.cost = cost
        self.data = data
        self.cfg = config
        self.rng = np.random.default_rng(config.seed)
        self.total_batches = data.batches_per_epoch * config.epochs
        if config.max_batches is not None:
            self.total_batches = min(self.total_batches, config.max_batches)
        self._initial_weights = weights
        bws = config.bandwidth_bps
        bws = list(bws) if isinstance(bws, (list, tuple)) else [bws] * max(self.N - 1, 1)
        self.link_models = [LinkModel(bw, config.base_latency_ms) for bw in bws]
        self.links_fwd = [SimulatedLink(self.link_models[i], f"fwd{i}") for i in range(self.N - 1)]
        self.links_bwd = [SimulatedLink(self.link_models[i], f"bwd{i}") for i in range(self.N - 1)]
        ctrl = LinkModel(min(bws), config.base_latency_ms)
        self.ctrl_up = [SimulatedLink(ctrl, f"up{i}") for i in range(self.N)]
        self.ctrl_down = [SimulatedLink(ctrl, f"down{i}") for i in range(self.N)]
        self.now = 0.0
        self._events: list = []
        self._seq = 0
        self.metrics: list = []
        self.reports: list = []
        self.cuts_history: list = []
        self.traces: list = []
        self.stash_peaks: list = []
        self.profiles: dict = {}
        self._info: dict = {}
        self._labels: dict = {}
        self._pending_cost: dict = {}
        self._fwd_op: dict = {}
        self._segment = 0
        self._pending_cuts: Optional[tuple] = None
        self._next_batch = 0
        self._done = 0
        # optional callback(stage, batch_id, sent, received, max_abs_error) on feature delivery
        self.rejected_plans: list = []
        self.feature_tap = None
        self._tapped: dict = {}
        self._last_error = 0.0

    # -- setup ---------------------------------------------------------------

    def _build_stages(self, cuts, weights: VersionedWeights, start_ms: float):
        validate_cuts(cuts, self.L, self.N)
        self.cuts = tuple(cuts)
        bounds = (0,) + self.cuts + (self.L,)
        self.stages = []
        for s in range(self.N):
            a, b = bounds[s] + 1, bounds[s + 1]
            st = StageState(
                s, self.N, (a, b), self.specs[a - 1:b], weights.slice(a - 1, b),
                max_in_flight=self.cfg.max_in_flight, forward_quota=self.total_batches - self._next_batch,
            )
            self.stages.append(st)
        self.busy_until = [start_ms] * self.N
        self._mbq = [None] * self.N
        self._mbq_epoch = [None] * self.N
        self._acc = [[0.0, 0] for _ in range(self.N)]
        self.cuts_history.append((start_ms, self.cuts))
        for s in range(self.N):
            self._push(start_ms, lambda: None)

    def _push(self, t: float, fn) -> None:
        heapq.heappush(self._events, (t, self._seq, fn))
        self._seq += 1

    def measure_profile(self, node: int):
        """Worker-side profile measurement; occupies the node for the measuring time."""
        from ..latency.synthetic import measure_profile

        dev = self.cost.effective_device(node, self.now)
        prof = measure_profile(dev, self.cost.costs, self.rng)
        self.profiles[node] = prof
        return prof, self.cost.profile_ms(node, self.now)

    def remeasure_profile(self, node: int):
        prof, ms = self.measure_profile(node)
        self.busy_until[node] = max(self.busy_until[node], self.now) + ms
        self._push(self.busy_until[node], lambda: None)
        return prof

    # -- codec / payloads ---------------------------------------------------------

    @property
    def current_epoch(self) -> int:
        return self.data.epoch_of(max(self._next_batch - 1, 0))

    def bitwidths(self, epoch: int):
        if self.cfg.codec_mode == "off":
            return None, None
        bw = bitwidths_for_epoch(self.cfg.codec_mode, self.cfg.lr_schedule, epoch, self.cfg.fixed_k)
        return bw.forward_k, bw.backward_k

    def _encode_features(self, s: int, y, shape, epoch: int):
        fk, _ = self.bitwidths(epoch)
        self._last_error = 0.0
        if fk is None:
            if y is None:
                return b"\x00" * raw_block_nbytes(shape)
            return serialize_block(RawBlock(y))
        if y is None:
            return b"\x00" * feature_block_nbytes(shape, fk)
        if self._mbq[s] is None or self._mbq_epoch[s] != epoch or self._mbq[s].k != fk:
            self._mbq[s] = MbqState(fk)
            self._mbq_epoch[s] = epoch
        block, self._mbq[s] = forward_quantize(y, self._mbq[s])
        self._last_error = block.max_abs_error
        return serialize_block(block)

    def _encode_grads(self, dx, shape, epoch: int):
        _, bk = self.bitwidths(epoch)
        if bk is None:
            return b"\x00" * raw_block_nbytes(shape) if dx is None else serialize_block(RawBlock(dx))
        if dx is None:
            return b"\x00" * gradient_block_nbytes(shape, bk)
        return serialize_block(compress_gradients(dx, bk, self.rng))

    def _decode(self, payload: bytes):
        if not self.cfg.compute:
            return None
        return decode_block(deserialize_block(payload))

    # -- stage ops -----------------------------------------------------------------

    def _act_shape(self, s: int):
        return (self.cfg.batch_size,) + self.stages[s].specs[-1].out_shape

    def _feed_stage0(self):
        st = self.stages[0]
        if st.fwd_queue or self._pending_cuts is not None:
            return
        if st.forwards >= st.forward_quota or self._next_batch >= self.total_batches:
            return
        b = self._next_batch
        x, labels, epoch = self.data.get(b)
        self._labels[b] = labels
        fk, bk = self.bitwidths(epoch)
        self._info[b] = _BatchInfo(epoch, [0.0] * self.N, [0.0] * self.N, forward_k=fk or 32, backward_k=bk or 32)
        st.fwd_queue.append((b, x if self.cfg.compute else None))
        self._next_batch += 1

    def _run_forward(self, s: int, bid: int):
        st = self.stages[s]
        x = st.fwd_queue[0][1]
        info = self._info[bid]
        a, b = st.layer_range
        op = self.cost.op_ms(s, a, b, FORWARD, self.now)
        ms = op + self._pending_cost.pop((s, bid, FORWARD), 0.0)
        self._fwd_op[(s, bid)] = op
        _, y = stash_and_forward(st, bid, x, self.cfg.compute)
        done = self.now
        if s == self.N - 1:
            labels = self._labels.pop(bid)
            if self.cfg.compute:
                loss, grad = softmax_cross_entropy(y, labels)
                info.loss = loss
            else:
                grad = None
            info.fwd_ms[s] = ms
            done += ms

            def finish():
                st.bwd_queue[bid] = grad
            self._push(done, finish)
        else:
            shape = self._act_shape(s)
            payload = self._encode_features(s, y, shape, info.epoch)
            if self.feature_tap is not None:
                self._tapped[(s, bid)] = (y, self._last_error)
            fk, _ = self.bitwidths(info.epoch)
            ms += self.cost.codec_ms(s, int(np.prod(shape)), fk, FORWARD, encode=True)
            info.fwd_ms[s] = ms
            done += ms
            msg = WireMessage(MsgType.FEATURES, bid, st.trace[-1].version, payload)

            def finish():
                d = self.links_fwd[s].send(msg, self.now)
                info.comm_bytes += msg.nbytes
                info.comm_ms += d.time_ms - d.start_ms
            self._push(done, finish)
        self.busy_until[s] = done

    def _run_backward(self, s: int, bid: int):
        st = self.stages[s]
        info = self._info[bid]
        a, b = st.layer_range
        op = self.cost.op_ms(s, a, b, BACKWARD, self.now)
        ms = op + self._pending_cost.pop((s, bid, BACKWARD), 0.0)
        # reports cover whole training steps: forward + backward compute of completed batches
        self._acc[s][0] += self._fwd_op.pop((s, bid)) + op
        self._acc[s][1] += 1
        _, dx = backward_with_stash(st, bid, lr_at_epoch(self.cfg.lr_schedule, info.epoch), self.cfg.compute)
        if s > 0:
            shape = (self.cfg.batch_size,) + st.specs[0].in_shape
            payload = self._encode_grads(dx, shape, info.epoch)
            _, bk = self.bitwidths(info.epoch)
            ms += self.cost.codec_ms(s, int(np.prod(shape)), bk, BACKWARD, encode=True)
            msg = WireMessage(MsgType.GRADS, bid, st.trace[-1].version, payload)

            def finish():
                d = self.links_bwd[s - 1].send(msg, self.now)
                info.comm_bytes += msg.nbytes
                info.comm_ms += d.time_ms - d.start_ms
                self._maybe_report(s)
        else:
            def finish():
                self._batch_done(bid)
                self._maybe_report(0)
        info.bwd_ms[s] = ms
        self.busy_until[s] = self.now + ms
        self._push(self.busy_until[s], finish)

    def _maybe_report(self, s: int):
        total, n = self._acc[s]
        if n == 0 or n % self.cfg.report_interval:
            return
        mean = total / n
        self._acc[s] = [0.0, 0]
        rep = LatencyReport(s, self.stages[s].layer_range, mean, n, self.now)
        if s == 0:
            self._handle_report(rep)
        else:
            body = json.dumps({"node": s, "range": list(rep.layer_range), "mean_ms": mean, "count": n}).encode()
            self.ctrl_up[s].send(WireMessage(MsgType.LATENCY_REPORT, self._done, self.stages[s].weights.version, body), self.now, tag=self._seq)

    def _handle_report(self, rep: LatencyReport):
        rep.time_ms = self.now
        if tuple(rep.layer_range) != self.stages[rep.node].layer_range:
            rep.decision = "stale"
            self.reports.append(rep)
            return
        new = self.coordinator.on_report(self, rep)
        self.reports.append(rep)
        if new is None or tuple(new) == self.cuts or self._pending_cuts is not None:
            return
        try:
            validate_cuts(tuple(new), self.L, self.N)
        except ValueError as exc:
            self.rejected_plans.append((self.now, tuple(new), str(exc)))
            return
        self._start_drain(tuple(new))

    def _batch_done(self, bid: int):
        info = self._info.pop(bid)
        row = {
            "batch": bid,
            "epoch": info.epoch,
            "loss": info.loss,
            **{f"fwd_ms_{i}": info.fwd_ms[i] for i in range(self.N)},
            **{f"bwd_ms_{i}": info.bwd_ms[i] for i in range(self.N)},
            "comm_bytes": info.comm_bytes,
            "comm_ms": info.comm_ms,
            "cuts": "|".join(map(str, self.cuts)),
            "forward_k": info.forward_k,
            "backward_k": info.backward_k,
            "done_ms": self.now,
        }
        self.metrics.append(row)
        self._done += 1

    # -- repartition ----------------------------------------------------------------

    def _start_drain(self, cuts: tuple):
        validate_cuts(cuts, self.L, self.N)
        self._pending_cuts = cuts
        st0 = self.stages[0]
        if st0.fwd_queue:
            bid, _ = st0.fwd_queue.pop()
            self._labels.pop(bid, None)
            self._info.pop(bid, None)
            self._next_batch -= 1
        for st in self.stages:
            st.forward_quota = st0.forwards

    def _data_in_flight(self) -> bool:
        return any(l.in_flight for l in self.links_fwd + self.links_bwd)

    def _try_repartition(self) -> bool:
        if self._pending_cuts is None:
            return False
        if not all(st.drained for st in self.stages) or self._data_in_flight():
            return False
        if any(b > self.now for b in self.busy_until):
            return False
        self._apply_repartition(self._pending_cuts)
        return True

    def _apply_repartition(self, cuts: tuple):
        versions = {st.weights.version for st in self.stages}
        if len(versions) != 1:
            raise RuntimeError(f"stage versions differ after drain: {versions}")
        full = VersionedWeights.concat([st.weights for st in self.stages])
        self._archive_traces()
        old_owner = self._owners(self.cuts)
        new_owner = self._owners(cuts)
        t_ctrl = self.now
        for s in range(1, self.N):
            body = json.dumps({"cuts": list(cuts)}).encode()
            d = self.ctrl_down[s].send(WireMessage(MsgType.REPARTITION, self._done, full.version, body), self.now, tag=self._seq)
            t_ctrl = max(t_ctrl, d.time_ms)
        t_resume = t_ctrl
        for i in range(self.N - 1):
            down = [l for l in range(self.L) if old_owner[l] <= i < new_owner[l]]
            up = [l for l in range(self.L) if new_owner[l] <= i < old_owner[l]]
            for layers, link in ((down, self.links_fwd[i]), (up, self.links_bwd[i])):
                if layers:
                    moved = VersionedWeights(full.version, tuple(full.params[l] for l in layers))
                    payload = checkpoint_bytes(moved) if self.cfg.compute else b"\x00" * checkpoint_nbytes(moved)
                    d = link.send(WireMessage(MsgType.WEIGHTS_XFER, self._done, full.version, payload), t_ctrl, tag="weights")
                    t_resume = max(t_resume, d.time_ms)
        for link in self.links_fwd + self.links_bwd + self.ctrl_down:
            link.receive(t_resume)
        self._pending_cuts = None
        self._segment += 1
        self._build_stages(cuts, full, t_resume)

    def _owners(self, cuts) -> list:
        bounds = (0,) + tuple(cuts) + (self.L,)
        owner = []
        for s in range(self.N):
            owner += [s] * (bounds[s + 1] - bounds[s])
        return owner

    def _archive_traces(self):
        for st in self.stages:
            self.traces.append((st.node_id, self._segment, list(st.trace)))
            self.stash_peaks.append((st.node_id, self._segment, st.max_stash_seen, st.stash_bound))

    # -- deliveries -----------------------------------------------------------------

    def _deliver(self):
        moved = False
        for i, link in enumerate(self.links_fwd):
            for d in link.receive(self.now):
                moved = True
                if d.msg.msg_type != MsgType.FEATURES:
                    continue
                st = self.stages[i + 1]
                x = self._decode(d.msg.payload)
                info = self._info[d.msg.batch_id]
                fk, _ = self.bitwidths(info.epoch)
                shape = (self.cfg.batch_size,) + st.specs[0].in_shape
                self._pending_cost[(i + 1, d.msg.batch_id, FORWARD)] = self.cost.codec_ms(i + 1, int(np.prod(shape)), fk, FORWARD, encode=False)
                if self.feature_tap is not None:
                    sent, err = self._tapped.pop((i, d.msg.batch_id))
                    self.feature_tap(i, d.msg.batch_id, sent, x, err)
                st.fwd_queue.append((d.msg.batch_id, x))
        for i, link in enumerate(self.links_bwd):
            for d in link.receive(self.now):
                moved = True
                if d.msg.msg_type != MsgType.GRADS:
                    continue
                st = self.stages[i]
                g = self._decode(d.msg.payload)
                info = self._info[d.msg.batch_id]
                _, bk = self.bitwidths(info.epoch)
                shape = (self.cfg.batch_size,) + st.specs[-1].out_shape
                self._pending_cost[(i, d.msg.batch_id, BACKWARD)] = self.cost.codec_ms(i, int(np.prod(shape)), bk, BACKWARD, encode=False)
                st.bwd_queue[d.msg.batch_id] = g
        for link in self.ctrl_up:
            for d in link.receive(self.now):
                moved = True
                body = json.loads(d.msg.payload)
                self._handle_report(LatencyReport(body["node"], tuple(body["range"]), body["mean_ms"], body["count"], self.now))
        for link in self.ctrl_down:
            if link.receive(self.now):
                moved = True
        return moved

    def _next_time(self) -> Optional[float]:
        times = [e[0] for e in self._events[:1]]
        for link in self.links_fwd + self.links_bwd + self.ctrl_up + self.ctrl_down:
            t = link.next_delivery_ms()
            if t is not None:
                times.append(t)
        return min(times) if times else None

    # -- main loop --------------------------------------------------------------------

    def _startup(self) -> tuple[tuple, float]:
        start = 0.0
        profiles = None
        if getattr(self.coordinator, "needs_profiles", False):
            # a joining worker brings a profile measured beforehand, just as the
            # central node times its own layers before training; only the HELLO
            # transfer is on the clock
            profiles = {}
            for s in range(1, self.N):
                prof, _ = self.measure_profile(s)
                body = json.dumps({"node": s, "profile": list(prof.times)}).encode()
                d = self.ctrl_up[s].send(WireMessage(MsgType.HELLO, 0, 0, body), 0.0, tag="hello")
                start = max(start, d.time_ms)
                profiles[s] = prof
            for link in self.ctrl_up:
                link.receive(start)
        return tuple(self.coordinator.initial_cuts(self, profiles)), start

    def run(self, watchdog_steps: int = 50_000_000) -> RunResult:
        cuts, start = self._startup()
        self.now = start
        self._build_stages(cuts, self._initial_weights, start)
        steps = 0
        while True:
            progressed = True
            while progressed:
                progressed = False
                while self._events and self._events[0][0] <= self.now:
                    _, _, fn = heapq.heappop(self._events)
                    fn()
                    progressed = True
                if self._deliver():
                    progressed = True
                if self._try_repartition():
                    progressed = True
                for s in range(self.N):
                    if self.busy_until[s] > self.now:
                        continue
                    if s == 0:
                        self._feed_stage0()
                    act, bid = schedule_next(self.stages[s])
                    if act == FORWARD:
                        self._run_forward(s, bid)
                        progressed = True
                    elif act == BACKWARD:
                        self._run_backward(s, bid)
                        progressed = True
                steps += 1
                if steps > watchdog_steps:
                    raise PipelineDeadlock("watchdog step limit exceeded")
            if self._done == self.total_batches and self._pending_cuts is None:
                break
            t = self._next_time()
            if t is None:
                state = [(st.node_id, st.forwards, st.backwards, st.forward_quota, len(st.fwd_queue), sorted(st.bwd_queue)) for st in self.stages]
                raise PipelineDeadlock(f"no pending events at t={self.now:.3f} ms with {self._done}/{self.total_batches} batches done; stages {state}")
            self.now = max(self.now, t)
        self._archive_traces()
        weights = VersionedWeights.concat([st.weights for st in self.stages])
        sent = sum(l.bytes_sent for l in self.links_fwd + self.links_bwd + self.ctrl_up + self.ctrl_down)
        return RunResult(self.now, self.metrics, weights, self.cuts_history, self.traces, self.reports,
                         self.stash_peaks, sent, self.total_batches)


def run_pipeline(specs, weights, cost, data, config: TrainRunConfig, n_nodes: int, coordinator=None, cuts=None) -> RunResult:
    return PipelineSimulator(specs, weights, cost, data, config, n_nodes, coordinator, cuts).run()
