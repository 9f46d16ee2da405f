import csv
import json

import numpy as np
import pytest

from accept.cli import ConfigError, config_hash, main, resolve_config
from accept.nn import load_checkpoint, mlp
from accept.partition import average_partition


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, command, cfg, *extra):
    path = tmp_path / f"{command}.json"
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), "--out", str(tmp_path / "out"), *extra])


# -- config handling -------------------------------------------------------------


def test_seed_is_mandatory():
    with pytest.raises(ConfigError, match="seed"):
        resolve_config("bench-codec", {}, None)


def test_command_line_seed_overrides_config():
    assert resolve_config("bench-codec", {"seed": 3}, 7)["seed"] == 7


@pytest.mark.parametrize("cfg", [
    {"seed": 0, "tensors": [{"name": "bad", "shape": [0, 4]}]},
    {"seed": 0, "tensors": [{"name": "bad", "shape": [1, 2, 3, 4, 5]}]},
    {"seed": 0, "k": [7]},
    {"seed": -1},
    {"seed": 0, "unknown": 1},
])
def test_invalid_codec_configs_rejected(cfg):
    with pytest.raises(ConfigError):
        resolve_config("bench-codec", cfg, None)


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    assert run(tmp_path, "train", {"seed": 0, "mode": "turbo"}) == 2
    assert "mode" in capsys.readouterr().err


def test_hash_tracks_every_field():
    a = resolve_config("train", {"seed": 0}, None)
    b = resolve_config("train", {"seed": 0, "bandwidth_mbps": 4.0}, None)
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(dict(reversed(list(a.items()))))


# -- bench-codec -----------------------------------------------------------------


@pytest.fixture(scope="module")
def codec_rows(tmp_path_factory):
    out = tmp_path_factory.mktemp("codec")
    assert main(["bench-codec", "--seed", "0", "--out", str(out)]) == 0
    return {(r["tensor"], r["method"]): r for r in read_csv(out / "bench_codec.csv")}


def test_codec_table_rows(codec_rows):
    methods = {m for _, m in codec_rows}
    assert methods == {"original", "uniform comp.", "uniform w/o enc."} | {
        f"{k}-bit {v}" for k in (2, 3, 4) for v in ("comp.", "w/o enc.")
    }


def test_codec_large_tensor_ratios(codec_rows):
    cr = {m: float(r["cr"]) for (t, m), r in codec_rows.items() if t == "large"}
    assert 15.9 <= cr["2-bit comp."] <= 16.0
    assert cr["2-bit w/o enc."] == pytest.approx(2.0, abs=0.01)
    assert cr["uniform w/o enc."] == pytest.approx(4.0, abs=0.01)
    assert cr["uniform comp."] == pytest.approx(8.0, abs=0.01)


def test_codec_wire_bytes_are_framed_blocks(codec_rows):
    # 17-byte frame + 18-byte block header + 2 alpha + m_q + 2 packed bits per element
    assert int(codec_rows[("large", "2-bit comp.")]["wire_bytes"]) == 17 + 18 + 12 + 2 * 1048576 // 8
    assert int(codec_rows[("large", "original")]["wire_bytes"]) == 17 + 18 + 4 * 1048576


def test_codec_csv_carries_hash(codec_rows):
    cfg = resolve_config("bench-codec", {}, 0)
    assert {r["config_hash"] for r in codec_rows.values()} == {config_hash(cfg)}


def test_codec_deterministic(tmp_path):
    cfg = {"seed": 5, "tensors": [{"name": "t", "shape": [9, 3, 3, 2]}]}
    run(tmp_path, "bench-codec", cfg)
    first = (tmp_path / "out" / "bench_codec.csv").read_bytes()
    run(tmp_path, "bench-codec", cfg)
    assert (tmp_path / "out" / "bench_codec.csv").read_bytes() == first


# -- train ------------------------------------------------------------------------

SMALL_DRY = {"seed": 1, "epochs": 2, "batches_per_epoch": 30, "report_interval": 10, "bandwidth_mbps": 0.25}


@pytest.mark.parametrize("mode", ["baseline", "accept"])
def test_train_deterministic(tmp_path, mode):
    cfg = {**SMALL_DRY, "mode": mode}
    outputs = []
    for sub in ("a", "b"):
        assert main(["train", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / sub)]) == 0
        outputs.append([(tmp_path / sub / f).read_bytes() for f in ("metrics.csv", "summary.csv", "checkpoint.bin")])
    assert outputs[0] == outputs[1]
    summary = read_csv(tmp_path / "a" / "summary.csv")[0]
    assert summary["status"] == "ok" and int(summary["batches"]) == 60
    assert float(summary["total_sim_ms"]) > 0
    assert float(read_csv(tmp_path / "a" / "wall_time.csv")[0]["wall_s"]) > 0


def _write(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_accept_faster_than_baseline_at_low_bandwidth(tmp_path):
    times = {}
    for mode in ("baseline", "accept"):
        assert main(["train", "--config", str(_write(tmp_path, {**SMALL_DRY, "mode": mode})), "--out", str(tmp_path / mode)]) == 0
        times[mode] = float(read_csv(tmp_path / mode / "summary.csv")[0]["total_sim_ms"])
    assert times["accept"] < times["baseline"]


def test_train_mlp_real_compute(tmp_path):
    cfg = {"seed": 0, "model": "mlp", "mode": "blc", "epochs": 3, "lr_schedule": [[0, 0.1]], "report_interval": 20}
    assert run(tmp_path, "train", cfg) == 0
    out = tmp_path / "out"
    summary = read_csv(out / "summary.csv")[0]
    assert float(summary["test_accuracy"]) > 0.6
    metrics = read_csv(out / "metrics.csv")
    assert all(np.isfinite(float(r["loss"])) for r in metrics)
    assert {r["forward_k"] for r in metrics} <= {"2", "3", "4"}
    w = load_checkpoint(out / "checkpoint.bin", mlp(16, [32, 32], 2))
    assert len(w) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_marks_run_failed(tmp_path):
    cfg = {"seed": 0, "model": "mlp", "mode": "baseline", "epochs": 2, "lr_schedule": [[0, 1e30]]}
    assert run(tmp_path, "train", cfg) == 1
    summary = read_csv(tmp_path / "out" / "summary.csv")[0]
    assert summary["status"] == "failed" and summary["error"]


def test_train_rejects_slowdown_outside_roster(tmp_path):
    cfg = {**SMALL_DRY, "slowdowns": [{"node": 5, "start_ms": 0, "factor": 2}]}
    assert run(tmp_path, "train", cfg) == 2


# -- partition ---------------------------------------------------------------------


def test_partition_plan_table(tmp_path):
    assert run(tmp_path, "partition", {"seed": 0}) == 0
    rows = read_csv(tmp_path / "out" / "partition.csv")
    assert [(r["scenario"], r["estimator"]) for r in rows] == [
        (s, e) for s in ("S1", "S2") for e in ("average", "ratio-baseline", "predictor", "oracle")
    ]
    by = {(r["scenario"], r["estimator"]): r for r in rows}
    assert by[("S1", "average")]["cuts"] == "|".join(map(str, average_partition(16, 3)))
    for s in ("S1", "S2"):
        best = float(by[(s, "oracle")]["true_bottleneck_ms"])
        assert all(float(by[(s, e)]["true_bottleneck_ms"]) >= best - 1e-9 for e in ("average", "ratio-baseline", "predictor"))
        assert float(by[(s, "predictor")]["true_bottleneck_ms"]) <= float(by[(s, "average")]["true_bottleneck_ms"])


def test_average_partition_fifteen_layers():
    assert average_partition(15, 3) == (5, 10)


# -- predictor ---------------------------------------------------------------------


def test_predictor_reports(tmp_path):
    cfg = {"seed": 0, "held_out": ["epyc-3c"], "sweep_nodes": [{"machine": "gold", "cores": 2}], "sweep_repeats": 1}
    assert run(tmp_path, "predictor", cfg) == 0
    acc = read_csv(tmp_path / "out" / "predictor_accuracy.csv")
    assert [(r["device"], float(r["tolerance"])) for r in acc] == [("epyc-3c", 0.05), ("epyc-3c", 0.10)]
    assert float(acc[0]["predictor"]) <= float(acc[1]["predictor"])
    sweep = read_csv(tmp_path / "out" / "dhat_sweep.csv")
    assert [int(r["dhat"]) for r in sweep] == list(range(2, 15))
    assert all(0 <= float(r["accuracy_mean"]) <= 1 for r in sweep)


def test_predictor_rejects_unknown_device(tmp_path):
    assert run(tmp_path, "predictor", {"seed": 0, "held_out": ["pentium-1c"]}) == 2
