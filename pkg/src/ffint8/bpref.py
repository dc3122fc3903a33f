"""Backpropagation reference trainer and gradient-distribution probes.

Two modes:

* ``fp32``: plain minibatch SGD on softmax cross-entropy.
* ``int8_naive``: identical arithmetic except that every backpropagated
  gradient tensor (the loss gradient at the logits, each inter-layer
  activation gradient, and each weight gradient) is passed through
  symmetric per-tensor INT8 quantization with stochastic rounding
  before it is used. Bias gradients stay full-precision. This
  reproduces the direct-quantization failure mode, which worsens with
  depth because quantization error compounds through the chain.

The gradient histogram measures a trained model: it accumulates the
chosen layer's weight-gradient elements over one epoch of batches
without updating anything, and reports excess kurtosis alongside the
binned counts.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .counters import OpCounters
from .errors import ConfigError, NumericFailure, ShapeError
from .ffcore import DenseLayer, TrainConfig, _STREAM_DATA, _STREAM_QUANT
from .metrics import MetricsLog, MetricsRow
from .qtensor import QuantRng, compute_scale, dequantize, quantize_stochastic


@dataclass
class BPModel:
    """ReLU hidden layers plus a linear softmax cross-entropy head."""

    layers: list[DenseLayer]

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].weight.shape[1]] + [
            layer.weight.shape[0] for layer in self.layers
        ]


@dataclass
class GradientHistogram:
    layer_index: int
    bin_edges: np.ndarray  # (bins + 1,) strictly increasing, symmetric about 0
    counts: np.ndarray  # (bins,) int64
    grad_min: float
    grad_max: float
    excess_kurtosis: float
    n_batches: int


def init_bp_model(widths: list[int], seed: int) -> BPModel:
    """He-initialized MLP; the last width is the class count."""
    if len(widths) < 2:
        raise ConfigError("need at least input and output widths")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        head = i == len(widths) - 2
        layers.append(
            DenseLayer(
                weight=rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in)),
                bias=np.zeros(fan_out),
                activation="identity" if head else "relu",
            )
        )
    return BPModel(layers=layers)


def _bp_forward(
    model: BPModel, x: np.ndarray, counters: OpCounters
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Returns logits and per-layer (input, output) caches."""
    caches = []
    h = x
    for layer in model.layers:
        if h.shape[1] != layer.weight.shape[1]:
            raise ShapeError(f"input {h.shape} vs weight {layer.weight.shape}")
        z = h @ layer.weight.T + layer.bias
        counters.add_fp32_mac(h.shape[0] * layer.weight.shape[0] * h.shape[1])
        y = np.maximum(z, 0.0) if layer.activation == "relu" else z
        caches.append((h, y))
        h = y
    return h, caches


def _softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient at the logits (already / batch)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    batch = logits.shape[0]
    loss = float(np.mean(log_z - shifted[np.arange(batch), labels]))
    probs = np.exp(shifted - log_z[:, None])
    probs[np.arange(batch), labels] -= 1.0
    return loss, probs / batch


def _fake_quantize(
    t: np.ndarray, qrng: QuantRng, counters: OpCounters
) -> np.ndarray:
    """Round-trip through the INT8 grid (quantize then dequantize)."""
    return dequantize(quantize_stochastic(t, compute_scale(t), qrng, counters))


def _bp_gradients(
    model: BPModel,
    x: np.ndarray,
    labels: np.ndarray,
    counters: OpCounters,
    qrng: QuantRng | None,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Loss and per-layer (gW, gb); qrng enables naive INT8 gradients."""
    logits, caches = _bp_forward(model, x, counters)
    loss, g = _softmax_ce(logits, labels)
    if qrng is not None:
        g = _fake_quantize(g, qrng, counters)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        x_in, y = caches[i]
        gz = g if layer.activation == "identity" else np.where(y > 0.0, g, 0.0)
        gw = gz.T @ x_in
        counters.add_fp32_mac(gz.shape[1] * x_in.shape[1] * gz.shape[0])
        gb = gz.sum(axis=0)
        if i > 0:
            g = gz @ layer.weight
            counters.add_fp32_mac(gz.shape[0] * gz.shape[1] * layer.weight.shape[1])
            if qrng is not None:
                g = _fake_quantize(g, qrng, counters)
        if qrng is not None:
            gw = _fake_quantize(gw, qrng, counters)
        grads[i] = (gw, gb)
    return loss, grads


def _bp_accuracy(model: BPModel, pixels: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = _bp_forward(model, pixels, OpCounters())
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_bp(
    model: BPModel,
    dataset: data_mod.Dataset,
    cfg: TrainConfig,
    mode: str,
    counters: OpCounters,
) -> tuple[BPModel, MetricsLog]:
    """Minibatch SGD on cross-entropy; metrics carry CE in mean_loss_pos."""
    if mode not in ("fp32", "int8_naive"):
        raise ConfigError(f"unknown bp mode {mode!r}")
    cfg.validate()
    data_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(_STREAM_DATA,))
    )
    qrng = QuantRng(cfg.seed, stream=_STREAM_QUANT) if mode == "int8_naive" else None
    log = MetricsLog()
    n = len(dataset.train)
    labels = dataset.train.labels
    test_px = dataset.test.pixels()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        before = counters.snapshot()
        perm = data_rng.permutation(n)
        loss_sum, n_batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads = _bp_gradients(
                model, dataset.train.pixels(idx), labels[idx], counters, qrng
            )
            for layer, (gw, gb) in zip(model.layers, grads):
                layer.weight -= cfg.learning_rate * gw
                layer.bias -= cfg.learning_rate * gb
            loss_sum += loss
            n_batches += 1
        mean_loss = loss_sum / n_batches
        if not math.isfinite(mean_loss):
            raise NumericFailure(f"train_bp produced a non-finite loss: {mean_loss}")
        train_wall = (time.perf_counter() - t0) * 1000.0
        t1 = time.perf_counter()
        n_sub = min(cfg.eval_train_size, n)
        train_acc = (
            _bp_accuracy(model, dataset.train.pixels(np.arange(n_sub)), labels[:n_sub])
            if n_sub
            else None
        )
        test_acc = _bp_accuracy(model, test_px, dataset.test.labels)
        eval_wall = (time.perf_counter() - t1) * 1000.0
        log.append(
            MetricsRow(
                epoch=epoch,
                split="train",
                accuracy=train_acc,
                mean_loss_pos=mean_loss,
                wall_ms=train_wall if cfg.measure_wall else 0.0,
                counter_delta=counters.delta_since(before).as_dict(),
            )
        )
        log.append(
            MetricsRow(
                epoch=epoch,
                split="test",
                accuracy=test_acc,
                wall_ms=eval_wall if cfg.measure_wall else 0.0,
            )
        )
    return model, log


def gradient_histogram(
    model: BPModel,
    dataset: data_mod.Dataset,
    layer_index: int,
    bins: int = 101,
    batch_size: int = 32,
    seed: int = 0,
) -> GradientHistogram:
    """Histogram of one layer's weight-gradient elements over an epoch.

    The model is not updated; two deterministic passes over the same
    batch stream find the range/moments and then fill the bins, which
    keeps memory flat for wide layers.
    """
    if not 0 <= layer_index < len(model.layers):
        raise IndexError(f"layer index {layer_index} out of range")
    n = len(dataset.train)
    labels = dataset.train.labels

    def batch_stream():
        order = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(_STREAM_DATA,))
        ).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield dataset.train.pixels(idx), labels[idx]

    # pass 1: range and raw moments
    lo, hi = math.inf, -math.inf
    count = 0
    s1 = s2 = s3 = s4 = 0.0
    n_batches = 0
    for px, lab in batch_stream():
        _, grads = _bp_gradients(model, px, lab, OpCounters(), None)
        gw = grads[layer_index][0].ravel()
        lo = min(lo, float(gw.min()))
        hi = max(hi, float(gw.max()))
        count += gw.size
        s1 += float(np.sum(gw))
        s2 += float(np.sum(gw**2))
        s3 += float(np.sum(gw**3))
        s4 += float(np.sum(gw**4))
        n_batches += 1
    mean = s1 / count
    m2 = s2 / count - mean**2
    m4 = (
        s4 / count
        - 4 * mean * (s3 / count)
        + 6 * mean**2 * (s2 / count)
        - 3 * mean**4
    )
    kurtosis = m4 / m2**2 - 3.0 if m2 > 0 else 0.0
    # pass 2: symmetric bins spanning the observed range
    span = max(abs(lo), abs(hi))
    if span == 0.0:
        span = 1.0  # all-zero gradients land in the middle bin
    edges = np.linspace(-span, span, bins + 1)
    counts = np.zeros(bins, dtype=np.int64)
    for px, lab in batch_stream():
        _, grads = _bp_gradients(model, px, lab, OpCounters(), None)
        hist, _ = np.histogram(grads[layer_index][0].ravel(), bins=edges)
        counts += hist
    return GradientHistogram(
        layer_index=layer_index,
        bin_edges=edges,
        counts=counts,
        grad_min=lo,
        grad_max=hi,
        excess_kurtosis=kurtosis,
        n_batches=n_batches,
    )


@dataclass
class DepthSweepRow:
    depth: int
    acc_fp32: float
    acc_int8: float
    diff: float


def depth_sweep(
    depths: list[int],
    dataset: data_mod.Dataset,
    cfg: TrainConfig,
    hidden_width: int = 500,
    n_classes: int = 10,
) -> list[DepthSweepRow]:
    """Final test accuracy of fp32 vs naive-INT8 training per depth."""
    rows = []
    in_width = dataset.train.width
    for depth in depths:
        widths = [in_width] + [hidden_width] * depth + [n_classes]
        accs = {}
        for mode in ("fp32", "int8_naive"):
            model = init_bp_model(widths, seed=cfg.seed)
            _, log = train_bp(model, dataset, cfg, mode, OpCounters())
            accs[mode] = log.test_accuracies()[-1][1]
        rows.append(
            DepthSweepRow(
                depth=depth,
                acc_fp32=accs["fp32"],
                acc_int8=accs["int8_naive"],
                diff=accs["int8_naive"] - accs["fp32"],
            )
        )
    return rows
