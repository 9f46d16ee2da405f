import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from accept.data import BatchSource, two_class_xor
from accept.latency import RECALIBRATE, STABLE, SyntheticDevice, measure_profile
from accept.nn import forward, init_weights, mlp
from accept.nn.weights import VersionedWeights
from accept.pipeline import (
    BACKWARD,
    FORWARD,
    ConstantCost,
    DeviceCost,
    PipelineDeadlock,
    PipelineSimulator,
    PredictorCoordinator,
    Slowdown,
    StaticCoordinator,
    TrainRunConfig,
    audit_trace,
    expected_forward_version,
    run_pipeline,
    train_sequential,
)
from accept.pipeline.stage import StageState, StashError, backward_with_stash, schedule_next, stash_and_forward

DS = two_class_xor(2000, 16, 0)
SPECS = mlp(16, [32, 32], 2)  # dense relu dense relu dense
W0 = init_weights(SPECS, 0)
FAST = 1e15  # bandwidth at which transfers cost effectively nothing


def source(batch_size=32):
    return BatchSource(DS.x_train, DS.y_train, batch_size, seed=0)


def config(**kw):
    base = dict(epochs=5, batch_size=32, lr_schedule=((0, 0.05),), bandwidth_bps=FAST)
    base.update(kw)
    return TrainRunConfig(**base)


def tickets(result, node, direction, segment=0):
    for n, seg, trace in result.traces:
        if n == node and seg == segment:
            return [t for t in trace if t.direction == direction]
    raise KeyError(node)


class ScriptedCoordinator(StaticCoordinator):
    """Returns ``plans[i]`` on the i-th report from node 0."""

    def __init__(self, cuts, plans):
        super().__init__(cuts)
        self.plans = list(plans)

    def on_report(self, sim, report):
        if report.node == 0 and self.plans:
            return self.plans.pop(0)
        return None


# -- 1F1B schedule -----------------------------------------------------------------


@pytest.fixture(scope="module")
def three_stage_run():
    return run_pipeline(SPECS, W0, ConstantCost([1, 1, 1], [2, 2, 2]), source(), config(max_batches=50), 3, cuts=(2, 4))


def test_batch5_versions_across_stages(three_stage_run):
    got = [next(t.version for t in tickets(three_stage_run, s, FORWARD) if t.batch_id == 5) for s in range(3)]
    assert got == [3, 4, 5]


def test_stage0_backwards_batch1_with_version0(three_stage_run):
    trace = next(t for n, _, t in three_stage_run.traces if n == 0)
    b0 = trace.index(next(t for t in trace if t.batch_id == 0 and t.direction == BACKWARD))
    b1 = next(t for t in trace if t.batch_id == 1 and t.direction == BACKWARD)
    assert trace.index(b1) > b0  # version 1 already exists
    assert b1.version == 0


def test_fifty_batch_audit(three_stage_run):
    for node, _, trace in three_stage_run.traces:
        assert audit_trace(trace) == []
        assert len(trace) == 100
    for node, _, peak, bound in three_stage_run.stash_peaks:
        assert peak <= bound
    for s in range(3):
        for t in tickets(three_stage_run, s, FORWARD):
            assert t.version == expected_forward_version(t.batch_id, s, 3)


def test_single_stage_alternates():
    r = run_pipeline(SPECS, W0, ConstantCost([1], [2]), source(), config(max_batches=10), 1, cuts=())
    trace = r.traces[0][2]
    assert [t.direction for t in trace] == [FORWARD, BACKWARD] * 10
    assert [t.version for t in trace] == [i // 2 for i in range(20)]
    assert [t.batch_id for t in trace] == [i // 2 for i in range(20)]


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(1, 5).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.floats(0.1, 5.0), min_size=2 * n, max_size=2 * n),
    st.floats(1e4, 1e7),
    st.sampled_from([None, 1, 2]),
)))
def test_schedule_properties_under_random_timing(case):
    n, times, bw, depth = case
    cuts = tuple(range(1, n))
    r = run_pipeline(SPECS, W0, ConstantCost(times[:n], times[n:]), source(),
                     config(max_batches=30, compute=False, bandwidth_bps=bw, max_in_flight=depth), n, cuts=cuts)
    assert r.total_batches == len(r.metrics) == 30
    for node, _, trace in r.traces:
        assert audit_trace(trace) == []
        limit = n - node if depth is None else min(n - node, depth)
        for t in trace:
            if t.direction == FORWARD:
                assert t.version == max(0, t.batch_id - limit + 1)
    for node, _, peak, bound in r.stash_peaks:
        assert peak <= bound


def test_no_deadlock_over_10k_batches():
    data = BatchSource(DS.x_train, DS.y_train, 1, seed=0)
    cost = ConstantCost([0.5, 2.0, 1.0, 0.7], [1.0, 4.0, 2.0, 1.5])
    cfg = config(epochs=7, batch_size=1, compute=False, bandwidth_bps=[1e6, 5e5, 2e6], base_latency_ms=0.3, max_batches=10_000)
    r = run_pipeline(SPECS, W0, cost, data, cfg, 4, cuts=(1, 2, 4))
    assert len(r.metrics) == 10_000
    assert [row["batch"] for row in r.metrics] == list(range(10_000))


def test_watchdog_raises():
    sim = PipelineSimulator(SPECS, W0, ConstantCost([1, 1], [1, 1]), source(), config(max_batches=20, compute=False), 2, cuts=(2,))
    with pytest.raises(PipelineDeadlock):
        sim.run(watchdog_steps=5)


def test_stash_bound_is_a_hard_fault():
    st_ = StageState(0, 2, (1, 5), SPECS, W0, forward_quota=10)
    x, _, _ = source().get(0)
    for b in range(2):
        st_.fwd_queue.append((b, x))
        stash_and_forward(st_, b, x)
        st_.weights = VersionedWeights(st_.weights.version + 1, st_.weights.params)
    st_.fwd_queue.append((2, x))
    with pytest.raises(StashError):
        stash_and_forward(st_, 2, x)
    with pytest.raises(StashError):
        backward_with_stash(st_, 9, 0.1)


def test_forward_waits_for_input_rather_than_skipping():
    st_ = StageState(1, 3, (1, 5), SPECS, W0, forward_quota=10)
    assert schedule_next(st_) == ("wait", None)


# -- equivalence and speed ---------------------------------------------------------------


def test_depth_one_matches_sequential_bitwise():
    cfg = config(epochs=2, lr_schedule=((0, 0.1), (1, 0.05)))
    r = run_pipeline(SPECS, W0, ConstantCost([1], [2]), source(), cfg, 1, cuts=())
    w, losses, _ = train_sequential(SPECS, W0, source(), 2, cfg.lr_schedule)
    assert r.weights.equal(w)
    assert r.weights.version == w.version
    assert r.losses().tolist() == [float(l) for l in losses]


def test_sequential_three_stage_pass_through_matches_sequential():
    cfg = config(max_in_flight=1, max_batches=40)
    r = run_pipeline(SPECS, W0, ConstantCost([1, 1, 1], [2, 2, 2]), source(), cfg, 3, cuts=(2, 4))
    w, losses, _ = train_sequential(SPECS, W0, source(), 1, cfg.lr_schedule, max_batches=40)
    assert r.weights.equal(w)
    assert r.losses().tolist() == [float(l) for l in losses]


def test_pipelining_beats_sequential():
    cost = ConstantCost([1, 1, 1], [2, 2, 2])
    piped = run_pipeline(SPECS, W0, cost, source(), config(max_batches=60, compute=False), 3, cuts=(2, 4))
    seq = run_pipeline(SPECS, W0, cost, source(), config(max_batches=60, compute=False, max_in_flight=1), 3, cuts=(2, 4))
    assert seq.makespan_ms == pytest.approx(60 * 9, rel=1e-6)
    assert piped.makespan_ms <= 0.55 * seq.makespan_ms


def test_codec_off_is_bit_identical_on_the_wire():
    seen = []
    sim = PipelineSimulator(SPECS, W0, ConstantCost([1, 1, 1], [2, 2, 2]), source(), config(max_batches=12), 3, cuts=(2, 4))
    sim.feature_tap = lambda s, b, sent, got, err: seen.append(np.array_equal(sent, got) and sent.dtype == got.dtype)
    sim.run()
    assert len(seen) == 24 and all(seen)


@pytest.mark.parametrize("mode", ["fixed", "adaptive"])
def test_codec_error_within_reported_residual(mode):
    seen = []
    sim = PipelineSimulator(SPECS, W0, ConstantCost([1, 1, 1], [2, 2, 2]), source(),
                            config(max_batches=30, codec_mode=mode), 3, cuts=(2, 4))
    sim.feature_tap = lambda s, b, sent, got, err: seen.append((float(np.max(np.abs(sent - got))), err))
    sim.run()
    assert len(seen) == 60
    for measured, reported in seen:
        assert measured <= reported * (1 + 1e-5) + 1e-6


# -- reports -------------------------------------------------------------------------


class Recorder(StaticCoordinator):
    def __init__(self, cuts):
        super().__init__(cuts)
        self.seen = []

    def on_report(self, sim, report):
        self.seen.append((report.node, sim._done))
        return None


def test_report_schedule():
    rec = Recorder((2, 4))
    r = run_pipeline(SPECS, W0, ConstantCost([1, 1, 1], [2, 3, 4]), source(),
                     config(max_batches=200, compute=False, report_interval=50), 3, coordinator=rec)
    for node, expect in zip(range(3), (3.0, 4.0, 5.0)):
        reps = [x for x in r.reports if x.node == node]
        assert len(reps) == 4
        assert all(x.count == 50 and x.mean_ms == pytest.approx(expect) for x in reps)
    # the central node reports right after completing batches 50, 100, ...
    assert [d for n, d in rec.seen if n == 0] == [50, 100, 150, 200]


def test_no_report_before_interval_completes():
    r = run_pipeline(SPECS, W0, ConstantCost([1, 1], [2, 2]), source(),
                     config(max_batches=49, compute=False, report_interval=50), 2, cuts=(2,))
    assert r.reports == []


class TruthPredictor:
    """Knows each node's true step time for its nominal device, scaled by the
    profile it is shown (a perfect predictor for linearly slowed devices)."""

    def __init__(self, cost, base_profiles):
        self.cost = cost
        self.base = base_profiles

    def _node(self, profile):
        for node, p in self.base.items():
            ratio = np.array(profile.times) / np.array(p.times)
            if np.allclose(ratio, ratio[0], rtol=0.06):
                return node, float(np.median(ratio))
        raise KeyError("unknown device")

    def predict(self, enc, profile):
        node, scale = self._node(profile)
        return scale * float(self.cost.layer_ms[node][enc.start - 1:enc.end].sum())

    def segment_times(self, profile):
        node, scale = self._node(profile)
        L = len(self.cost.layer_ms[node])
        T = np.zeros((L + 1, L + 1))
        for a in range(1, L + 1):
            for b in range(a, L + 1):
                T[a, b] = scale * float(self.cost.layer_ms[node][a - 1:b].sum())
        return T


def _distinct_devices():
    return [SyntheticDevice(f"d{i}", g, m, 0.02) for i, (g, m) in enumerate([(4.0, 3.0), (3.0, 2.0), (2.0, 4.0)])]


def test_slowdown_triggers_recalibration_within_one_interval():
    devices = _distinct_devices()
    probe = DeviceCost(devices, SPECS, 32, seed=0)
    rng = np.random.default_rng(0)
    base = {n: measure_profile(devices[n], probe.costs, rng) for n in (1, 2)}
    cfg = config(epochs=3, compute=False, report_interval=20)

    def run(slowdowns):
        coord = PredictorCoordinator(TruthPredictor(probe, base), probe.layer_ms[0], adapt=False, epsilon=0.2, min_gain=1.0)
        cost = DeviceCost(devices, SPECS, 32, seed=0, slowdowns=slowdowns)
        return run_pipeline(SPECS, W0, cost, source(), cfg, 3, coordinator=coord), coord

    steady, coord = run([])
    assert coord.recalibrations == [] and all(x.decision == STABLE for x in steady.reports if x.node)
    start = steady.cuts_history[0][0]  # after the startup profiling
    t_slow = start + 0.4 * (steady.makespan_ms - start)
    r, coord = run([Slowdown(1, t_slow, 2.0)])
    node1 = [x for x in r.reports if x.node == 1]
    before = [x for x in node1 if x.time_ms < t_slow]
    after = [x for x in node1 if x.time_ms >= t_slow]
    assert before and all(x.decision == STABLE for x in before)
    # the first window may straddle the slowdown; the first full window after it must flag
    assert RECALIBRATE in [x.decision for x in after[:2]]
    assert len(coord.recalibrations) == 1
    assert all(x.decision == STABLE for x in [y for y in r.reports if y.node == 2])


# -- repartition -------------------------------------------------------------------------


def chained_forward(sim, x):
    for st_ in sim.stages:
        x, _ = forward(st_.specs, st_.weights, x)
    return x


def test_moving_one_layer_preserves_outputs():
    sim = PipelineSimulator(SPECS, W0, ConstantCost([1, 1, 1], [1, 1, 1]), source(), config(max_batches=1), 3, cuts=(2, 4))
    sim._build_stages((2, 4), W0, 0.0)
    x, _, _ = source().get(7)
    before = chained_forward(sim, x)
    sim._apply_repartition((3, 4))
    assert [s.layer_range for s in sim.stages] == [(1, 3), (4, 4), (5, 5)]
    assert {s.weights.version for s in sim.stages} == {W0.version}
    assert np.array_equal(chained_forward(sim, x), before)
    # layer 3 moves from stage 1 up to stage 0, against the forward direction
    assert sim.links_bwd[0].bytes_sent > 0 and sim.links_fwd[0].bytes_sent == 0


def test_identical_plan_is_noop():
    cost = ConstantCost([1, 1, 1], [2, 2, 2])
    cfg = config(max_batches=120, report_interval=20)
    plain = run_pipeline(SPECS, W0, cost, source(), cfg, 3, cuts=(2, 4))
    same = run_pipeline(SPECS, W0, cost, source(), cfg, 3, coordinator=ScriptedCoordinator((2, 4), [(2, 4)] * 3))
    assert len(same.cuts_history) == 1
    assert same.weights.equal(plain.weights)
    assert same.makespan_ms == plain.makespan_ms


def test_invalid_plan_rejected_and_training_continues():
    cost = ConstantCost([1, 1, 1], [2, 2, 2])
    sim = PipelineSimulator(SPECS, W0, cost, source(), config(max_batches=60, report_interval=20), 3,
                            coordinator=ScriptedCoordinator((2, 4), [(4, 2), (0, 5)]))
    r = sim.run()
    assert len(sim.rejected_plans) == 2
    assert r.cuts_history == [(0.0, (2, 4))]
    assert len(r.metrics) == 60


def test_repartition_moves_layers_and_keeps_training():
    cost = ConstantCost([1, 1, 1], [2, 2, 2])
    cfg = config(epochs=3, report_interval=50, lr_schedule=((0, 0.1),))
    r = run_pipeline(SPECS, W0, cost, source(), cfg, 3, coordinator=ScriptedCoordinator((2, 4), [None, (3, 4)]))
    assert [c for _, c in r.cuts_history] == [(2, 4), (3, 4)]
    assert len(r.metrics) == r.total_batches
    for _, _, trace in r.traces:
        assert audit_trace(trace) == []
    # versions keep counting through the drain
    assert r.weights.version == r.total_batches
    losses = r.losses()
    k = next(i for i, row in enumerate(r.metrics) if row["cuts"] == "3|4")
    prev = losses[k - 50:k]
    assert abs(losses[k] - prev.mean()) <= 3 * prev.std()
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_metrics_columns():
    r = run_pipeline(SPECS, W0, ConstantCost([1, 1], [2, 2]), source(), config(max_batches=5, codec_mode="fixed"), 2, cuts=(2,))
    row = r.metrics[0]
    assert list(row) == ["batch", "epoch", "loss", "fwd_ms_0", "fwd_ms_1", "bwd_ms_0", "bwd_ms_1",
                         "comm_bytes", "comm_ms", "cuts", "forward_k", "backward_k", "done_ms"]
    assert row["cuts"] == "2" and row["forward_k"] == 2 and row["comm_bytes"] > 0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainRunConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainRunConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainRunConfig(codec_mode="zip")
