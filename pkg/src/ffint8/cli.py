"""Command-line entry point and experiment orchestration.

Verbs: train-ff, train-bp, depth-sweep, grad-hist, count-ops, eval.
Configuration comes from per-command defaults, optionally overlaid by a
JSON config file (--config; unknown keys are rejected), then by flags
(flags win). Every run writes a manifest.json that contains the fully
resolved config; pointing --config at a manifest reproduces the run's
metrics.csv byte for byte.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite training loss).

Output files per run directory: manifest.json, metrics.csv (trainers),
checkpoint.npz (trainers), sweep.csv / hist.csv / cost.csv for the
reporting commands, and summary.json with timings and headline numbers
(summary.json carries wall-clock values, so it is not part of the
bitwise-reproducibility contract; metrics.csv is).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bpref import depth_sweep, gradient_histogram, init_bp_model, train_bp
from .costmeter import MODES, ArchSpec, analytic_counts, cost_report
from .counters import OpCounters
from .data import Dataset, LabeledImages, load_mnist_dir
from .errors import (
    BadMagic,
    ConfigError,
    CountMismatch,
    FFInt8Error,
    InvalidTensor,
    NumericFailure,
    TruncatedFile,
)
from .ffcore import (
    CHECKPOINT_FORMAT_VERSION,
    TrainConfig,
    evaluate_accuracy,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_ff_lookahead,
    train_ff_vanilla,
)
from .metrics import METRICS_HEADER

MANIFEST_FORMAT_VERSION = 1
METRICS_SCHEMA_VERSION = 1
DATA_ROOT_ENV = "FFINT8_DATA"

TRAIN_FF_DEFAULTS = {
    "mode": "lookahead",  # "lookahead" | "vanilla"
    "hidden": [500, 500],
    "theta": 2.0,
    "lambda0": 0.0,
    "lambda_step": 0.001,
    "lambda_max": None,  # null = uncapped
    "epochs": 150,
    "batch_size": 32,
    "learning_rate": 0.03,
    "precision": "int8",
    "lookahead_mode": "chained",
    "seed": 0,
    "goodness_skip_first_layer": False,
    "weight_rounding": "nearest",
    "normalize_inputs": True,
    "eval_train_size": 1024,
    "measure_wall": False,
    "train_subset": 0,  # 0 = full training set
    "data_root": None,
}

TRAIN_BP_DEFAULTS = {
    "mode": "fp32",  # "fp32" | "int8_naive"
    "hidden": [500, 500],
    "epochs": 20,
    "batch_size": 32,
    "learning_rate": 0.1,
    "seed": 0,
    "eval_train_size": 1024,
    "measure_wall": False,
    "train_subset": 0,
    "data_root": None,
}

DEPTH_SWEEP_DEFAULTS = {
    "depths": [0, 1, 2, 3],
    "hidden_width": 500,
    "epochs": 20,
    "batch_size": 32,
    "learning_rate": 0.1,
    "seed": 0,
    "train_subset": 0,
    "data_root": None,
}

GRAD_HIST_DEFAULTS = {
    "depths": [0, 1, 2, 3],
    "hidden_width": 500,
    "bins": 101,
    "train_epochs": 3,
    "batch_size": 32,
    "learning_rate": 0.1,
    "seed": 0,
    "train_subset": 0,
    "hist_subset": 10000,  # batches drawn from this many samples
    "data_root": None,
}

COUNT_OPS_DEFAULTS = {
    "arch": [784, 500, 500, 500, 10],
    "batch": 10,
    "instrumented": True,
    "seed": 0,
}


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def resolve_config(defaults: dict, config_path: str | None, overrides: dict) -> dict:
    cfg = dict(defaults)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if isinstance(loaded, dict) and "command" in loaded and "config" in loaded:
            loaded = loaded["config"]  # a manifest doubles as a config
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _data_root(cfg: dict) -> Path:
    root = cfg.get("data_root") or os.environ.get(DATA_ROOT_ENV) or "data/mnist"
    return Path(root)


def _load_dataset(cfg: dict) -> Dataset:
    ds = load_mnist_dir(_data_root(cfg))
    subset = int(cfg.get("train_subset") or 0)
    if subset and subset < len(ds.train):
        ds = Dataset(
            train=LabeledImages(ds.train.raw[:subset], ds.train.labels[:subset]),
            test=ds.test,
        )
    return ds


def _write_manifest(out: Path, command: str, cfg: dict) -> None:
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "command": command,
        "config": cfg,
        "versions": {
            "package": __version__,
            "metrics_schema": METRICS_SCHEMA_VERSION,
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
        },
    }
    out.joinpath("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_summary(out: Path, payload: dict) -> None:
    out.joinpath("summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        theta=float(cfg.get("theta", 2.0)),
        lambda0=float(cfg.get("lambda0", 0.0)),
        lambda_step=float(cfg.get("lambda_step", 0.001)),
        lambda_max=math.inf if cfg.get("lambda_max") is None else float(cfg["lambda_max"]),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        precision=cfg.get("precision", "fp32"),
        lookahead_mode=cfg.get("lookahead_mode", "chained"),
        seed=int(cfg["seed"]),
        goodness_skip_first_layer=bool(cfg.get("goodness_skip_first_layer", False)),
        weight_rounding=cfg.get("weight_rounding", "nearest"),
        eval_train_size=int(cfg.get("eval_train_size", 1024)),
        measure_wall=bool(cfg.get("measure_wall", False)),
    )


def cmd_train_ff(args: argparse.Namespace) -> int:
    overrides = {
        k: getattr(args, k, None)
        for k in TRAIN_FF_DEFAULTS
        if k not in ("hidden",)
    }
    if args.hidden is not None:
        overrides["hidden"] = _parse_int_list(args.hidden)
    cfg = resolve_config(TRAIN_FF_DEFAULTS, args.config, overrides)
    if cfg["mode"] not in ("lookahead", "vanilla"):
        raise ConfigError(f"unknown train-ff mode {cfg['mode']!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "train-ff", cfg)
    dataset = _load_dataset(cfg)
    tc = _train_config(cfg)
    tc.validate()
    model = init_model(
        [dataset.train.width] + list(cfg["hidden"]),
        seed=tc.seed,
        label_slots=10,
        normalize_inputs=bool(cfg["normalize_inputs"]),
    )
    counters = OpCounters()
    trainer = train_ff_lookahead if cfg["mode"] == "lookahead" else train_ff_vanilla
    t0 = time.perf_counter()
    model, log = trainer(model, dataset, tc, counters)
    wall_s = time.perf_counter() - t0
    log.write_csv(out / "metrics.csv")
    save_checkpoint(out / "checkpoint.npz", model, cfg)
    tests = log.test_accuracies()
    _write_summary(
        out,
        {
            "final_test_accuracy": tests[-1][1] if tests else None,
            "epochs": tc.epochs,
            "wall_seconds": wall_s,
            "counters": counters.as_dict(),
        },
    )
    if tests:
        print(f"final test accuracy: {tests[-1][1]!r}")
    return 0


def cmd_train_bp(args: argparse.Namespace) -> int:
    overrides = {k: getattr(args, k, None) for k in TRAIN_BP_DEFAULTS if k != "hidden"}
    if args.hidden is not None:
        overrides["hidden"] = _parse_int_list(args.hidden)
    cfg = resolve_config(TRAIN_BP_DEFAULTS, args.config, overrides)
    if cfg["mode"] not in ("fp32", "int8_naive"):
        raise ConfigError(f"unknown train-bp mode {cfg['mode']!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "train-bp", cfg)
    dataset = _load_dataset(cfg)
    tc = _train_config(cfg)
    tc.validate()
    model = init_bp_model([dataset.train.width] + list(cfg["hidden"]) + [10], seed=tc.seed)
    counters = OpCounters()
    t0 = time.perf_counter()
    model, log = train_bp(model, dataset, tc, cfg["mode"], counters)
    wall_s = time.perf_counter() - t0
    log.write_csv(out / "metrics.csv")
    tests = log.test_accuracies()
    _write_summary(
        out,
        {
            "final_test_accuracy": tests[-1][1] if tests else None,
            "wall_seconds": wall_s,
            "counters": counters.as_dict(),
        },
    )
    if tests:
        print(f"final test accuracy: {tests[-1][1]!r}")
    return 0


def cmd_depth_sweep(args: argparse.Namespace) -> int:
    overrides = {k: getattr(args, k, None) for k in DEPTH_SWEEP_DEFAULTS if k != "depths"}
    if args.depths is not None:
        overrides["depths"] = _parse_int_list(args.depths)
    cfg = resolve_config(DEPTH_SWEEP_DEFAULTS, args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "depth-sweep", cfg)
    dataset = _load_dataset(cfg)
    tc = _train_config({**cfg, "precision": "fp32"})
    tc.eval_train_size = 0
    rows = depth_sweep(
        list(cfg["depths"]), dataset, tc, hidden_width=int(cfg["hidden_width"])
    )
    lines = ["depth,acc_fp32,acc_int8,diff"]
    lines += [
        f"{r.depth},{r.acc_fp32!r},{r.acc_int8!r},{r.diff!r}" for r in rows
    ]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    _write_summary(out, {"rows": [vars(r) for r in rows]})
    for line in lines:
        print(line)
    return 0


def cmd_grad_hist(args: argparse.Namespace) -> int:
    overrides = {k: getattr(args, k, None) for k in GRAD_HIST_DEFAULTS if k != "depths"}
    if args.depths is not None:
        overrides["depths"] = _parse_int_list(args.depths)
    cfg = resolve_config(GRAD_HIST_DEFAULTS, args.config, overrides)
    if not list(cfg["depths"]):
        raise ConfigError("depths list is empty; nothing to histogram")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "grad-hist", cfg)
    dataset = _load_dataset(cfg)
    tc = _train_config(
        {
            **cfg,
            "epochs": int(cfg["train_epochs"]),
            "precision": "fp32",
            "eval_train_size": 0,
        }
    )
    hist_n = int(cfg["hist_subset"]) or len(dataset.train)
    hist_data = Dataset(
        train=LabeledImages(dataset.train.raw[:hist_n], dataset.train.labels[:hist_n]),
        test=dataset.test,
    )
    lines = ["depth,bin_lo,bin_hi,count"]
    kurtosis = {}
    for depth in cfg["depths"]:
        widths = [dataset.train.width] + [int(cfg["hidden_width"])] * int(depth) + [10]
        model = init_bp_model(widths, seed=tc.seed)
        if tc.epochs > 0:
            train_bp(model, dataset, tc, "fp32", OpCounters())
        hist = gradient_histogram(
            model,
            hist_data,
            layer_index=0,
            bins=int(cfg["bins"]),
            batch_size=tc.batch_size,
            seed=tc.seed,
        )
        kurtosis[str(depth)] = hist.excess_kurtosis
        for lo, hi, count in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
            lines.append(f"{depth},{lo!r},{hi!r},{int(count)}")
    (out / "hist.csv").write_text("\n".join(lines) + "\n")
    _write_summary(out, {"excess_kurtosis": kurtosis})
    print(json.dumps({"excess_kurtosis": kurtosis}))
    return 0


def cmd_count_ops(args: argparse.Namespace) -> int:
    overrides = {k: getattr(args, k, None) for k in COUNT_OPS_DEFAULTS if k != "arch"}
    if args.arch is not None:
        overrides["arch"] = _parse_int_list(args.arch)
    cfg = resolve_config(COUNT_OPS_DEFAULTS, args.config, overrides)
    widths = [int(w) for w in cfg["arch"]]
    batch = int(cfg["batch"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "count-ops", cfg)
    analytic = {
        mode: analytic_counts(ArchSpec(widths, batch, mode)) for mode in MODES
    }
    parity = {}
    if cfg["instrumented"]:
        measured = _instrumented_counts(widths, batch, int(cfg["seed"]))
        for mode, counters in measured.items():
            parity[mode] = counters == analytic[mode]
            analytic[f"{mode}_measured"] = counters
    report = cost_report(
        analytic,
        rows_processed={"ff_int8": 2 * batch, "bp_fp32": batch, "bp_int8": batch},
    )
    (out / "cost.csv").write_text(report.to_csv_text())
    _write_summary(out, {"parity": parity})
    print(report.to_text())
    if parity:
        print(f"instrumented == analytic: {parity}")
    return 0


def _instrumented_counts(widths: list[int], batch: int, seed: int) -> dict[str, OpCounters]:
    """One-batch oracle runs of the real trainers for count parity."""
    gen = np.random.default_rng(seed)
    raw = gen.integers(0, 256, (batch, widths[0]), dtype=np.uint8)
    measured = {}
    # forward-forward: detached look-ahead step (the analytic dataflow)
    slots = min(10, widths[0])
    ff_labels = gen.integers(0, slots, batch).astype(np.int64)
    ff_data = Dataset(
        train=LabeledImages(raw, ff_labels),
        test=LabeledImages(raw[:1], ff_labels[:1]),
    )
    ff_cfg = TrainConfig(
        epochs=1,
        batch_size=batch,
        learning_rate=0.01,
        precision="int8",
        lookahead_mode="detached",
        seed=seed,
        eval_train_size=0,
    )
    model = init_model(widths, seed=seed, label_slots=slots)
    counters = OpCounters()
    train_ff_lookahead(model, ff_data, ff_cfg, counters)
    measured["ff_int8"] = counters
    # backprop: class count is the last width
    bp_labels = gen.integers(0, widths[-1], batch).astype(np.int64)
    bp_data = Dataset(
        train=LabeledImages(raw, bp_labels),
        test=LabeledImages(raw[:1], bp_labels[:1]),
    )
    bp_cfg = TrainConfig(
        epochs=1, batch_size=batch, learning_rate=0.01, seed=seed, eval_train_size=0
    )
    for mode, name in (("fp32", "bp_fp32"), ("int8_naive", "bp_int8")):
        bp_model = init_bp_model(widths, seed=seed)
        c = OpCounters()
        train_bp(bp_model, bp_data, bp_cfg, mode, c)
        measured[name] = c
    return measured


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, meta = load_checkpoint(ckpt)
    echo = meta.get("config", {})
    cfg = TrainConfig(
        precision=echo.get("precision", "fp32"),
        goodness_skip_first_layer=bool(echo.get("goodness_skip_first_layer", False)),
        epochs=1,
    )
    root = {"data_root": args.data_root}
    dataset = load_mnist_dir(_data_root(root))
    split = dataset.test if args.split == "test" else dataset.train
    acc = evaluate_accuracy(model, split.pixels(), split.labels, cfg)
    print(f"accuracy: {acc!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ffint8",
        description="INT8 forward-forward training engine and cost meter",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, defaults):
        p.add_argument("--config", help="JSON config file or a run manifest")
        p.add_argument("--out", required=True, help="output directory")
        for key, value in defaults.items():
            flag = "--" + key.replace("_", "-")
            if key in ("hidden", "depths", "arch"):
                p.add_argument(flag, type=str, default=None, dest=key)
            elif isinstance(value, bool):
                p.add_argument(
                    flag, type=lambda s: s.lower() in ("1", "true", "yes"),
                    default=None, dest=key,
                )
            elif isinstance(value, int) and not isinstance(value, bool):
                p.add_argument(flag, type=int, default=None, dest=key)
            elif isinstance(value, float):
                p.add_argument(flag, type=float, default=None, dest=key)
            else:
                p.add_argument(flag, type=str, default=None, dest=key)

    add_common(sub.add_parser("train-ff", help="train with forward-forward"), TRAIN_FF_DEFAULTS)
    add_common(sub.add_parser("train-bp", help="backprop reference trainer"), TRAIN_BP_DEFAULTS)
    add_common(sub.add_parser("depth-sweep", help="fp32 vs naive-INT8 accuracy by depth"), DEPTH_SWEEP_DEFAULTS)
    add_common(sub.add_parser("grad-hist", help="first-layer gradient histograms"), GRAD_HIST_DEFAULTS)
    add_common(sub.add_parser("count-ops", help="analytic and instrumented op counts"), COUNT_OPS_DEFAULTS)

    pe = sub.add_parser("eval", help="evaluate a checkpoint")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data-root", default=None, dest="data_root")
    pe.add_argument("--split", choices=("train", "test"), default="test")
    return parser


COMMANDS = {
    "train-ff": cmd_train_ff,
    "train-bp": cmd_train_bp,
    "depth-sweep": cmd_depth_sweep,
    "grad-hist": cmd_grad_hist,
    "count-ops": cmd_count_ops,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (BadMagic, CountMismatch, TruncatedFile, InvalidTensor, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except FFInt8Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
