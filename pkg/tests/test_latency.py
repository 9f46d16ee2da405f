import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accept.latency import (
    RECALIBRATE,
    STABLE,
    FlopLinearBaseline,
    HardwareProfile,
    LatencySample,
    PredictorConfig,
    PredictorDivergedError,
    SubModelEncoding,
    SyntheticDevice,
    UntrainedPredictorError,
    accuracy_within,
    adaptive_update,
    all_submodels,
    build_dataset,
    device_configs,
    device_samples,
    drift_check,
    encode_submodel,
    layer_costs,
    layer_flops,
    load_dataset_csv,
    load_predictor,
    measure_profile,
    pretrain,
    reference_model_specs,
    representative_indices,
    samples_to_arrays,
    save_dataset_csv,
    save_predictor,
    select_representative_submodels,
)
from accept.latency.predictor import LatencyPredictor

COSTS = layer_costs(reference_model_specs(), 32)
LF = layer_flops(COSTS)
DEVICES = device_configs()
HELD_OUT = ("epyc-3c", "core-i7-2c", "cortex-4c")


@pytest.fixture(scope="module")
def split():
    rng = np.random.default_rng(0)
    per = {d.name: device_samples(d, COSTS, rng) for d in DEVICES}
    train = [s for name, S in per.items() if name not in HELD_OUT for s in S]
    test = {name: per[name] for name in HELD_OUT}
    return train, test


@pytest.fixture(scope="module")
def trained(split):
    model, losses = pretrain(split[0])
    return model, losses


# -- encodings -------------------------------------------------------------------


def test_encode_worked_example():
    assert encode_submodel(10, 3, 7).bits.tolist() == [0, 0, 1, 1, 1, 1, 1, 0, 0, 0]
    assert encode_submodel(10, 1, 10).bits.tolist() == [1] * 10
    assert encode_submodel(10, 1, 1).bits.tolist() == [1] + [0] * 9


@pytest.mark.parametrize("start,end", [(0, 3), (4, 3), (2, 11)])
def test_encode_rejects_bounds(start, end):
    with pytest.raises(ValueError):
        encode_submodel(10, start, end)


def test_from_bits_rejects_gaps():
    with pytest.raises(ValueError):
        SubModelEncoding.from_bits("0110100")
    with pytest.raises(ValueError):
        SubModelEncoding.from_bits("0000")


@given(st.integers(1, 30).flatmap(lambda L: st.tuples(st.just(L), st.integers(1, L), st.integers(1, L))))
def test_encoding_string_roundtrip(case):
    L, a, b = case
    a, b = min(a, b), max(a, b)
    enc = encode_submodel(L, a, b)
    assert SubModelEncoding.from_bits(enc.to_string()) == enc
    assert enc.bits.sum() == b - a + 1


def test_representative_indices_l10():
    assert representative_indices(55) == [0, 6, 12, 18, 24, 30, 36, 42, 48, 54]


def test_representatives_cover_flop_endpoints():
    reps = select_representative_submodels(LF)
    totals = [LF[s.start - 1:s.end].sum() for s in all_submodels(len(LF))]
    rep_totals = [LF[r.start - 1:r.end].sum() for r in reps]
    assert rep_totals[0] == min(totals) and rep_totals[-1] == max(totals)
    assert rep_totals == sorted(rep_totals)
    assert reps == select_representative_submodels(LF)


def test_representative_tie_break():
    reps = select_representative_submodels([0.0] * 10)
    order = [(a, b) for a in range(1, 11) for b in range(a, 11)]
    assert [(r.start, r.end) for r in reps] == [order[i] for i in representative_indices(55)]


def test_representatives_need_four_layers():
    with pytest.raises(ValueError):
        select_representative_submodels([1.0, 2.0, 3.0])


# -- synthetic devices --------------------------------------------------------------


def test_twenty_four_configurations():
    assert len(DEVICES) == 24
    assert len({d.name for d in DEVICES}) == 24


def test_measurement_noise_bounded():
    rng = np.random.default_rng(1)
    d = DEVICES[5]
    true = d.submodel_time(COSTS, 2, 9)
    runs = [d.run(COSTS, 2, 9, rng) for _ in range(500)]
    assert max(abs(r / true - 1) for r in runs) <= d.noise
    assert abs(d.measure(COSTS, 2, 9, rng) / true - 1) <= d.noise


def test_scaled_device_is_linear():
    d = DEVICES[3]
    np.testing.assert_allclose(d.scaled(2.0).layer_times(COSTS), 2 * d.layer_times(COSTS))


def test_layer_times_positive_and_heterogeneous():
    a, b = DEVICES[0].layer_times(COSTS), DEVICES[-1].layer_times(COSTS)
    assert np.all(a > 0)
    ratio = b / a
    assert ratio.max() / ratio.min() > 1.5  # devices disagree on which layers are expensive


# -- predictor ---------------------------------------------------------------------


def test_untrained_rejected():
    m = LatencyPredictor(16, PredictorConfig())
    with pytest.raises(UntrainedPredictorError):
        m.predict(encode_submodel(16, 1, 3), HardwareProfile((1.0,) * 10))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        pretrain([])


def test_divergence_reports_seed():
    D = build_dataset(DEVICES[:2], COSTS, 0)
    with np.errstate(all="ignore"), pytest.raises(PredictorDivergedError, match="seed=7"):
        pretrain(D, PredictorConfig(lr=1e9, epochs=3, seed=7))


def test_memorizes_ten_samples():
    D = build_dataset(DEVICES[:4], COSTS, 0)
    small = [D[i] for i in np.random.default_rng(0).choice(len(D), 10, replace=False)]
    m, _ = pretrain(small, PredictorConfig(epochs=300))
    E, P, t = samples_to_arrays(small)
    assert np.max(np.abs(m.predict_batch(E, P) / t - 1)) < 0.05


def test_training_loss_decreases(trained):
    _, losses = trained
    assert losses[-1] < losses[0] / 50
    first, last = np.mean(losses[:10]), np.mean(losses[-10:])
    assert last < first


def test_predict_is_pure(trained, split):
    model, _ = trained
    s = split[0][123]
    a = model.predict(s.encoding, s.profile)
    b = model.predict(s.encoding, s.profile)
    assert a == b and a > 0


def test_dims_checked(trained):
    model, _ = trained
    with pytest.raises(ValueError):
        model.predict_batch(np.ones((1, 15)), np.ones((1, 10)))


def test_held_out_beats_flop_baseline(trained, split):
    model, _ = trained
    ours, flops = [], []
    for S in split[1].values():
        E, P, t = samples_to_arrays(S)
        ours.append(accuracy_within(model.predict_batch(E, P), t, 0.10))
        base = FlopLinearBaseline.from_profile(LF, S[0].profile)
        flops.append(accuracy_within(base.predict([LF[s.encoding.start - 1:s.encoding.end].sum() for s in S]), t, 0.10))
    assert np.mean(ours) > np.mean(flops)
    assert np.mean(ours) >= 0.85


def test_doubling_profile_doubles_prediction(trained):
    model, _ = trained
    rng = np.random.default_rng(3)
    subs = all_submodels(16)
    E = np.stack([s.bits for s in subs])
    for d in (DEVICES[5], DEVICES[13]):  # epyc-2c, core-i7-2c
        p1 = measure_profile(d, COSTS, rng).as_array()
        p2 = measure_profile(d.scaled(2.0), COSTS, rng).as_array()
        r = model.predict_batch(E, np.tile(p2, (len(E), 1))) / model.predict_batch(E, np.tile(p1, (len(E), 1)))
        assert abs(np.median(r) - 2) < 0.2
        assert np.mean(np.abs(r - 2) <= 0.2) >= 0.9


def test_dataset_order_does_not_matter(split):
    D = build_dataset(DEVICES[:6], COSTS, 0)
    cfg = PredictorConfig(epochs=20)
    m1, _ = pretrain(D, cfg)
    shuffled = [D[i] for i in np.random.default_rng(9).permutation(len(D))]
    m2, _ = pretrain(shuffled, cfg)
    assert m1.weights.equal(m2.weights)


def test_pretrain_deterministic_given_seed():
    D = build_dataset(DEVICES[:3], COSTS, 0)
    cfg = PredictorConfig(epochs=5, seed=3)
    assert pretrain(D, cfg)[0].weights.equal(pretrain(D, cfg)[0].weights)
    assert not pretrain(D, cfg)[0].weights.equal(pretrain(D, PredictorConfig(epochs=5, seed=4))[0].weights)


def test_segment_times_match_predict(trained, split):
    model, _ = trained
    prof = split[0][0].profile
    T = model.segment_times(prof)
    assert T[3, 7] == pytest.approx(model.predict(encode_submodel(16, 3, 7), prof), rel=1e-6)
    assert T[5, 4] == 0


# -- drift and adaptation -----------------------------------------------------------


def test_drift_examples():
    assert drift_check(100.0, 100.0, 1e-9) == STABLE
    assert drift_check(100.0, 150.0, 0.2) == RECALIBRATE
    assert drift_check(110.0, 100.0, 0.2) == STABLE
    with pytest.raises(ValueError):
        drift_check(1.0, 0.0)


@given(st.floats(0.01, 1e4), st.floats(0.01, 1e4), st.floats(0.01, 2.0))
def test_drift_rule_matches_definition(pred, rep, eps):
    assert (drift_check(pred, rep, eps) == RECALIBRATE) == (abs(rep - pred) / rep > eps)


def test_empty_update_is_identity(trained, split):
    model, _ = trained
    assert adaptive_update(model, [], split[0]) is model


def test_update_on_seen_device_is_neutral(trained, split):
    model, _ = trained
    train = split[0]
    seen = [s for s in train if s.profile == train[0].profile]
    new, rest = seen[:8], seen[8:]
    E, P, t = samples_to_arrays(rest)
    before = accuracy_within(model.predict_batch(E, P), t, 0.10)
    updated = adaptive_update(model, new, train, seed=0)
    after = accuracy_within(updated.predict_batch(E, P), t, 0.10)
    assert abs(after - before) <= 0.02


def test_update_deterministic(trained, split):
    model, _ = trained
    new = list(split[1].values())[0][:5]
    a = adaptive_update(model, new, split[0][:500], seed=1)
    b = adaptive_update(model, new, split[0][:500], seed=1)
    assert a.weights.equal(b.weights)


# -- baselines and persistence -------------------------------------------------------


def test_flop_baseline_exact_for_pure_compute_device():
    d = SyntheticDevice("flat", gflops=3.0, mem_gbps=1e12, overhead_ms=0.0, noise=0.0)
    prof = measure_profile(d, COSTS, np.random.default_rng(0), runs=1, warmup=0)
    base = FlopLinearBaseline.from_profile(LF, prof)
    assert base.predict(LF[2:9].sum()) == pytest.approx(d.submodel_time(COSTS, 3, 9), rel=1e-6)


def test_flop_baseline_rejects_zero_flops():
    with pytest.raises(ValueError):
        FlopLinearBaseline.fit([0.0, 0.0], [1.0, 2.0])


def test_dataset_csv_roundtrip(tmp_path):
    D = build_dataset(DEVICES[:1], COSTS, 0)[:20]
    path = tmp_path / "d.csv"
    save_dataset_csv(D, path)
    header = path.read_text().splitlines()[0]
    assert header.split(",") == ["encoding_bits"] + [f"profile_{i}" for i in range(10)] + ["time_ms"]
    assert load_dataset_csv(path) == D


def test_sample_time_must_be_positive():
    with pytest.raises(ValueError):
        LatencySample(encode_submodel(4, 1, 2), HardwareProfile((1.0,) * 10), 0.0)


def test_checkpoint_roundtrip(trained, split, tmp_path):
    model, _ = trained
    path = tmp_path / "p.bin"
    save_predictor(model, path)
    assert path.read_bytes()[:4] == b"EPT1"
    loaded = load_predictor(path, 16)
    E, P, _ = samples_to_arrays(split[0][:50])
    np.testing.assert_allclose(loaded.predict_batch(E, P), model.predict_batch(E, P), rtol=1e-5)
    with pytest.raises(ValueError):
        load_predictor(path, 12)
