"""Command-line experiment runner.

    accept bench-codec --config codec.json --seed 0 --out results/
    accept train       --config train.json --out results/
    accept partition   --config partition.json --out results/
    accept predictor   --config predictor.json --out results/

Every subcommand reads a JSON config (checked against a schema), takes its seed
from ``--seed`` or the config, and writes CSVs whose ``config_hash`` column is
a digest of the resolved config.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import codec
from .data import BatchSource, accuracy, as_input, two_class_xor
from .experiments import MODE_CODEC, MODE_PREDICTOR, MODES, MODELS, DrySource, train_predictor_for
from .latency import (
    DHAT_SIZES,
    PredictorConfig,
    SyntheticDevice,
    accuracy_within,
    build_dataset,
    device_configs,
    device_samples,
    dhat_sweep,
    flop_baseline_accuracy,
    layer_costs,
    measure_profile,
    pretrain,
    samples_to_arrays,
)
from .latency.synthetic import BASE_MACHINES, UNSEEN_MACHINE, machine
from .nn import NonFiniteGradientError, init_weights, mlp, predict_classes, save_checkpoint
from .partition import (
    ExecTimeTable,
    average_partition,
    dp_optimal_partition,
    ftpipehd_ratio_estimate,
    plan_bottleneck,
)
from .pipeline import (
    DeviceCost,
    PredictorCoordinator,
    RatioCoordinator,
    Slowdown,
    TrainRunConfig,
    pipeline_comm_table,
    run_pipeline,
)
from .transport import LinkModel, MsgType, WireMessage, serialize

log = logging.getLogger("accept")

# -- schemas -------------------------------------------------------------------

_NODE = {
    "type": "object",
    "properties": {
        "machine": {"enum": sorted(BASE_MACHINES) + [UNSEEN_MACHINE[0]]},
        "cores": {"type": "integer", "minimum": 1, "maximum": 64},
        "speed": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["machine", "cores"],
    "additionalProperties": False,
}
_ROSTER = {"type": "array", "items": _NODE, "minItems": 1}
_SEED = {"type": "integer", "minimum": 0}
_MODEL = {"enum": sorted(MODELS) + ["mlp"]}

SCHEMAS = {
    "bench-codec": {
        "type": "object",
        "properties": {
            "seed": _SEED,
            "tensors": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "properties": {
                        "name": {"type": "string"},
                        "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1, "maxItems": 4},
                    },
                    "required": ["name", "shape"],
                    "additionalProperties": False,
                },
            },
            "k": {"type": "array", "items": {"enum": [1, 2, 3, 4]}, "minItems": 1},
            "gradient_k": {"enum": [4, 8]},
        },
        "additionalProperties": False,
    },
    "train": {
        "type": "object",
        "properties": {
            "seed": _SEED,
            "mode": {"enum": list(MODES)},
            "codec_mode": {"enum": ["off", "fixed", "adaptive"]},
            "fixed_k": {"enum": [2, 3, 4]},
            "model": _MODEL,
            "nodes": {**_ROSTER, "minItems": 2},
            "bandwidth_mbps": {"type": "number", "exclusiveMinimum": 0},
            "epochs": {"type": "integer", "minimum": 1},
            "batches_per_epoch": {"type": "integer", "minimum": 1},
            "batch_size": {"type": "integer", "minimum": 1},
            "lr_schedule": {
                "type": "array",
                "minItems": 1,
                "items": {"type": "array", "prefixItems": [{"type": "integer", "minimum": 0}, {"type": "number"}],
                          "minItems": 2, "maxItems": 2},
            },
            "report_interval": {"type": "integer", "minimum": 1},
            "min_gain": {"type": "number", "minimum": 0, "maximum": 1},
            "epsilon": {"type": "number", "exclusiveMinimum": 0},
            "slowdowns": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "node": {"type": "integer", "minimum": 0},
                        "start_ms": {"type": "number", "minimum": 0},
                        "factor": {"type": "number", "exclusiveMinimum": 0},
                    },
                    "required": ["node", "start_ms", "factor"],
                    "additionalProperties": False,
                },
            },
        },
        "additionalProperties": False,
    },
    "partition": {
        "type": "object",
        "properties": {
            "seed": _SEED,
            "model": _MODEL,
            "batch_size": {"type": "integer", "minimum": 1},
            "bandwidth_mbps": {"type": "number", "exclusiveMinimum": 0},
            "scenarios": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "properties": {"name": {"type": "string"}, "nodes": {**_ROSTER, "minItems": 2}},
                    "required": ["name", "nodes"],
                    "additionalProperties": False,
                },
            },
        },
        "additionalProperties": False,
    },
    "predictor": {
        "type": "object",
        "properties": {
            "seed": _SEED,
            "model": _MODEL,
            "batch_size": {"type": "integer", "minimum": 1},
            "held_out": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "sweep_nodes": _ROSTER,
            "sweep_repeats": {"type": "integer", "minimum": 1},
        },
        "additionalProperties": False,
    },
}

DEFAULTS = {
    "bench-codec": {
        "tensors": [{"name": "large", "shape": [128, 16, 16, 32]}, {"name": "small", "shape": [32, 8, 8, 16]}],
        "k": [2, 3, 4],
        "gradient_k": 4,
    },
    "train": {
        "mode": "accept",
        "model": "comm-heavy",
        "nodes": [{"machine": "xeon", "cores": 2}, {"machine": "gold", "cores": 1}, {"machine": "gold", "cores": 1}],
        "bandwidth_mbps": 1.0,
        "epochs": 4,
        "batches_per_epoch": 1000,
        "batch_size": 32,
        "lr_schedule": [[0, 0.05], [1, 0.01]],
        "report_interval": 25,
        "min_gain": 0.05,
        "epsilon": 0.2,
        "fixed_k": 2,
        "slowdowns": [],
    },
    "partition": {
        "model": "comm-heavy",
        "batch_size": 32,
        "bandwidth_mbps": 1.0,
        "scenarios": [
            {"name": "S1", "nodes": [{"machine": "xeon", "cores": 2}, {"machine": "gold", "cores": 1}, {"machine": "gold", "cores": 1}]},
            {"name": "S2", "nodes": [{"machine": "xeon", "cores": 3}, {"machine": "kunpeng", "cores": 1}, {"machine": "epyc", "cores": 1}]},
        ],
    },
    "predictor": {
        "model": "comm-heavy",
        "batch_size": 32,
        "held_out": ["epyc-3c", "core-i7-2c", "cortex-4c"],
        "sweep_nodes": [{"machine": "gold", "cores": c} for c in (1, 2, 3, 4)],
        "sweep_repeats": 5,
    },
}

# MLP runs train for real on this dataset; the other models run dry
MLP_DATA = dict(n=2000, dim=16, hidden=(32, 32))


class ConfigError(ValueError):
    pass


def resolve_config(command: str, raw: dict, seed: Optional[int]) -> dict:
    """Validate ``raw`` against the command's schema and fill defaults.
    ``seed`` (from the command line) overrides the config's seed."""
    try:
        jsonschema.validate(raw, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{command} config: {exc.message} at {'/'.join(map(str, exc.absolute_path)) or '<root>'}") from None
    cfg = {**DEFAULTS[command], **raw}
    if seed is not None:
        cfg["seed"] = seed
    if "seed" not in cfg:
        raise ConfigError("a seed is required: pass --seed or set \"seed\" in the config")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_csv(path: Path, rows: Sequence[dict], chash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError(f"no rows for {path.name}")
    fields = list(rows[0]) + ["config_hash"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "config_hash": chash})
    return path


def node_device(node: dict) -> SyntheticDevice:
    name = node["machine"]
    base = UNSEEN_MACHINE[1] if name == UNSEEN_MACHINE[0] else BASE_MACHINES[name]
    dev = machine(name, base, node["cores"])
    speed = node.get("speed", 1.0)
    return dev if speed == 1.0 else dev.scaled(1.0 / speed, f"{dev.name}-x{speed:g}")


def model_specs(name: str):
    if name == "mlp":
        return mlp(MLP_DATA["dim"], list(MLP_DATA["hidden"]), 2)
    return MODELS[name]()


# -- bench-codec -----------------------------------------------------------------


def _frame(payload: bytes) -> int:
    return len(serialize(WireMessage(MsgType.FEATURES, 0, 0, payload)))


def bench_codec_rows(cfg: dict) -> list[dict]:
    """Wire sizes (frame header included) of one tensor under each encoding.
    ``cr`` is measured on the wire; ``cr_formula`` counts only the payload bits."""
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    for t in cfg["tensors"]:
        shape = codec.blocks.as_shape4(t["shape"])
        x = np.maximum(rng.standard_normal(shape), 0).astype(np.float32)
        g = (1e-3 * rng.standard_normal(shape)).astype(np.float32)
        elems = int(np.prod(shape))
        original = _frame(codec.serialize_block(codec.RawBlock(x)))

        def row(method, k, wire, formula):
            return {"tensor": t["name"], "shape": "x".join(map(str, shape)), "elements": elems, "method": method,
                    "k": k, "wire_bytes": wire, "cr": original / wire, "cr_formula": formula}

        rows.append(row("original", 32, original, 1.0))
        for k in cfg["k"]:
            block, _ = codec.forward_quantize(x, codec.MbqState(k))
            rows.append(row(f"{k}-bit comp.", k, _frame(codec.serialize_block(block)), codec.compression_ratio_forward(shape, k)))
            # the same block with one byte per sign bit instead of packed bits
            signs = codec.forward_decode(block.packed, shape, k)
            head = codec.serialize_block(block)[: codec.feature_block_nbytes(shape, k) - codec.packed_feature_bytes(shape, k)]
            raw = head + codec.forward_unencoded(signs).tobytes()
            rows.append(row(f"{k}-bit w/o enc.", k, _frame(raw), (elems * 32) / (elems * k * 8 + 32 * (k + 1))))
        gk = cfg["gradient_k"]
        gblock = codec.compress_gradients(g, gk, rng)
        rows.append(row("uniform comp.", gk, _frame(codec.serialize_block(gblock)), codec.compression_ratio_backward(shape, gk)))
        head = codec.serialize_block(gblock)[: codec.gradient_block_nbytes(shape, gk) - codec.packed_gradient_bytes(shape, gk)]
        levels = codec.backward_decode(gblock.packed, shape, gk)
        raw = head + np.asarray(levels, dtype=np.int8).tobytes()
        rows.append(row("uniform w/o enc.", gk, _frame(raw), (elems * 32) / (elems * 8 + 32)))
    return rows


def cmd_bench_codec(cfg: dict, out: Path) -> list[Path]:
    return [write_csv(out / "bench_codec.csv", bench_codec_rows(cfg), config_hash(cfg))]


# -- train -------------------------------------------------------------------------


def _train_run(cfg: dict):
    """Build and run one pipeline; returns (RunResult, coordinator, specs, dataset or None)."""
    specs = model_specs(cfg["model"])
    devices = [node_device(n) for n in cfg["nodes"]]
    seed = cfg["seed"]
    mode = cfg["mode"]
    slow = [Slowdown(s["node"], s["start_ms"], s["factor"]) for s in cfg["slowdowns"]]
    if any(s.node >= len(devices) for s in slow):
        raise ConfigError("slowdown refers to a node outside the roster")
    cost = DeviceCost(devices, specs, cfg["batch_size"], seed=seed, slowdowns=slow)
    central = cost.layer_ms[0]
    if MODE_PREDICTOR[mode]:
        pred, data = train_predictor_for(specs, cfg["batch_size"], exclude=[d.name for d in devices[1:]], seed=seed)
        coord = PredictorCoordinator(pred, central, data, epsilon=cfg["epsilon"], min_gain=cfg["min_gain"], seed=seed)
    else:
        coord = RatioCoordinator(central, len(devices), min_gain=cfg["min_gain"])
    codec_mode = cfg.get("codec_mode", MODE_CODEC[mode])
    dataset = None
    if cfg["model"] == "mlp":
        dataset = two_class_xor(MLP_DATA["n"], MLP_DATA["dim"], seed)
        source = BatchSource(dataset.x_train, dataset.y_train, cfg["batch_size"], seed=seed, in_shape=specs[0].in_shape)
    else:
        source = DrySource(cfg["batches_per_epoch"])
    run_cfg = TrainRunConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr_schedule=tuple(map(tuple, cfg["lr_schedule"])),
        report_interval=cfg["report_interval"], codec_mode=codec_mode, fixed_k=cfg["fixed_k"],
        bandwidth_bps=cfg["bandwidth_mbps"] * 1e6, seed=seed, compute=dataset is not None,
    )
    result = run_pipeline(specs, init_weights(specs, seed), cost, source, run_cfg, len(devices), coordinator=coord)
    return result, coord, specs, dataset


def cmd_train(cfg: dict, out: Path) -> tuple[list[Path], bool]:
    chash = config_hash(cfg)
    t0 = time.perf_counter()
    status, error = "ok", ""
    result = None
    try:
        result, coord, specs, dataset = _train_run(cfg)
        losses = result.losses()
        if dataset is not None and not np.all(np.isfinite(losses)):
            status, error = "failed", "non-finite loss"
    except NonFiniteGradientError as exc:
        status, error = "failed", str(exc)
    wall = time.perf_counter() - t0
    paths = []
    summary = {"mode": cfg["mode"], "model": cfg["model"], "bandwidth_mbps": cfg["bandwidth_mbps"], "status": status,
               "error": error, "total_sim_ms": "", "wall_s": f"{wall:.3f}", "batches": "", "repartitions": "",
               "recalibrations": "", "bytes_sent": "", "final_cuts": "", "test_accuracy": ""}
    if result is not None:
        summary.update(
            total_sim_ms=result.makespan_ms, batches=result.total_batches, repartitions=len(result.cuts_history) - 1,
            recalibrations=len(getattr(coord, "recalibrations", ())), bytes_sent=result.bytes_sent,
            final_cuts="|".join(map(str, result.cuts_history[-1][1])),
        )
        if dataset is not None and status == "ok":
            summary["test_accuracy"] = accuracy(predict_classes(specs, result.weights, as_input(dataset.x_test, specs[0].in_shape)), dataset.y_test)
        paths.append(write_csv(out / "metrics.csv", result.metrics, chash))
        save_checkpoint(result.weights, out / "checkpoint.bin")
        paths.append(out / "checkpoint.bin")
    # wall time is the one non-deterministic field, so it lives in its own file
    wall_row = {"wall_s": summary.pop("wall_s")}
    paths.append(write_csv(out / "summary.csv", [summary], chash))
    paths.append(write_csv(out / "wall_time.csv", [wall_row], chash))
    if status != "ok":
        log.error("run failed: %s", error)
    return paths, status == "ok"


# -- partition ---------------------------------------------------------------------


def partition_rows(cfg: dict) -> list[dict]:
    """Plans from three estimators, each scored against the devices' true times.

    average: equal layer counts.  ratio-baseline: the central node's layer
    times scaled by what each worker measured on its share of the average
    plan.  predictor: predicted sub-model times from each worker's profile,
    with the predictor pre-trained without any of the scenario's workers.
    """
    specs = model_specs(cfg["model"])
    L, bs, seed = len(specs), cfg["batch_size"], cfg["seed"]
    costs = layer_costs(specs, bs)
    rng = np.random.default_rng(seed)
    rows = []
    for sc in cfg["scenarios"]:
        devices = [node_device(n) for n in sc["nodes"]]
        N = len(devices)
        if N > L:
            raise ConfigError(f"scenario {sc['name']}: {N} nodes for {L} layers")
        links = [LinkModel(cfg["bandwidth_mbps"] * 1e6) for _ in range(N - 1)]
        comm = pipeline_comm_table(specs, bs, links, None, None)
        true = ExecTimeTable.from_layer_times(np.stack([d.layer_times(costs) for d in devices]))
        central = devices[0].layer_times(costs)

        avg = average_partition(L, N)
        bounds = (0,) + tuple(avg) + (L,)
        est = [central]
        for i, d in enumerate(devices[1:], start=1):
            a, b = bounds[i] + 1, bounds[i + 1]
            est.append(ftpipehd_ratio_estimate(central, d.measure(costs, a, b, rng), (a, b)))
        ratio = dp_optimal_partition(ExecTimeTable.from_layer_times(np.stack(est)), comm)

        pred, _ = train_predictor_for(specs, bs, exclude=[d.name for d in devices[1:]], seed=seed)
        seg = np.zeros((N, L + 1, L + 1))
        seg[0] = ExecTimeTable.from_layer_times(central[None]).segments[0]
        for i, d in enumerate(devices[1:], start=1):
            seg[i] = pred.segment_times(measure_profile(d, costs, rng))
        predicted = dp_optimal_partition(ExecTimeTable(seg), comm)

        for name, cuts in (("average", tuple(avg)), ("ratio-baseline", ratio.cuts), ("predictor", predicted.cuts)):
            rows.append({"scenario": sc["name"], "estimator": name, "cuts": "|".join(map(str, cuts)),
                         "true_bottleneck_ms": plan_bottleneck(cuts, true, comm)})
        rows.append({"scenario": sc["name"], "estimator": "oracle", "cuts": "|".join(map(str, dp_optimal_partition(true, comm).cuts)),
                     "true_bottleneck_ms": dp_optimal_partition(true, comm).bottleneck_ms})
    return rows


def cmd_partition(cfg: dict, out: Path) -> list[Path]:
    return [write_csv(out / "partition.csv", partition_rows(cfg), config_hash(cfg))]


# -- predictor ---------------------------------------------------------------------


def cmd_predictor(cfg: dict, out: Path) -> list[Path]:
    chash = config_hash(cfg)
    specs = model_specs(cfg["model"])
    costs = layer_costs(specs, cfg["batch_size"])
    seed = cfg["seed"]
    devices = device_configs()
    known = {d.name for d in devices}
    unknown = sorted(set(cfg["held_out"]) - known)
    if unknown:
        raise ConfigError(f"unknown held-out devices {unknown}; choose from the 24 synthetic configurations")
    rng = np.random.default_rng(seed)
    per = {d.name: device_samples(d, costs, rng) for d in devices}
    train = [s for name, S in per.items() if name not in cfg["held_out"] for s in S]
    model, _ = pretrain(train, PredictorConfig(seed=seed))
    acc_rows = []
    for name in cfg["held_out"]:
        E, P, t = samples_to_arrays(per[name])
        pred = model.predict_batch(E, P)
        for tol in (0.05, 0.10):
            acc_rows.append({"device": name, "tolerance": tol, "predictor": accuracy_within(pred, t, tol),
                             "flop_linear": flop_baseline_accuracy(costs, per[name], tol)})

    full = build_dataset(devices, costs, seed)
    model, _ = pretrain(full, PredictorConfig(seed=seed))
    sweep = dhat_sweep(model, full, [node_device(n) for n in cfg["sweep_nodes"]], costs,
                       sizes=DHAT_SIZES, repeats=cfg["sweep_repeats"], seed=seed)
    before = float(np.mean(sweep[0]))
    sweep_rows = [
        {"dhat": n, "accuracy_mean": float(np.mean(sweep[n])), "accuracy_sem": float(np.std(sweep[n]) / np.sqrt(len(sweep[n]))),
         "runs": len(sweep[n]), "accuracy_before_update": before}
        for n in DHAT_SIZES
    ]
    return [write_csv(out / "predictor_accuracy.csv", acc_rows, chash), write_csv(out / "dhat_sweep.csv", sweep_rows, chash)]


# -- entry point ---------------------------------------------------------------------

COMMANDS = {
    "bench-codec": cmd_bench_codec,
    "train": cmd_train,
    "partition": cmd_partition,
    "predictor": cmd_predictor,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="accept", description="Pipeline-parallel edge training experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON config; omitted keys take defaults")
        s.add_argument("--seed", type=int, help="overrides the config's seed")
        s.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = json.loads(args.config.read_text()) if args.config else {}
        cfg = resolve_config(args.command, raw, args.seed)
        res = COMMANDS[args.command](cfg, args.out)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"accept {args.command}: {exc}", file=sys.stderr)
        return 2
    paths, ok = res if isinstance(res, tuple) else (res, True)
    for path in paths:
        print(path)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
