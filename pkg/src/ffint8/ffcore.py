"""Forward-forward layers, goodness losses, gradients, and trainers.

A layer's goodness is the sum of squared ReLU outputs. Positive batches
descend softplus(theta - G), negative batches descend softplus(G - theta),
so training pushes goodness above theta on positives and below it on
negatives. The look-ahead trainer augments layer i's loss with
lambda * (sum of later layers' losses) computed from one shared forward
pass; in "chained" mode the later-layer terms are differentiated through
the intervening forward computations, in "detached" mode they are treated
as constants (which reduces the gradient to the local one).

Precision modes:

* ``fp32``: full-precision GEMMs (counted as 32-bit FMUL/FADD).
* ``int8``: activations are quantized with stochastic rounding, weights
  with nearest rounding (both per-tensor, symmetric), all GEMMs run
  through the exact INT8*INT8->INT32 kernel, and only quantization
  events touch 32-bit counters. Master weights stay full-precision and
  are re-quantized after every update.

Inference (``predict``) always uses nearest rounding so that a
checkpoint evaluates to the same accuracy every time.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from .counters import OpCounters
from .errors import ConfigError, NumericFailure, ShapeError, StaleForward
from .metrics import MetricsLog, MetricsRow
from .qtensor import (
    QuantRng,
    QuantizedTensor,
    compute_scale,
    int8_matmul,
    quantize_nearest,
    quantize_stochastic,
)

CHECKPOINT_FORMAT_VERSION = 1

# deterministic stream ids under one run seed
_STREAM_INIT = 0
_STREAM_DATA = 1
_STREAM_QUANT = 2


# ---------------------------------------------------------------------------
# model types


@dataclass
class DenseLayer:
    """Full-precision master parameters of one dense layer."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    normalize_input: bool = False
    activation: str = "relu"  # "relu" | "identity"


@dataclass
class FFModel:
    layers: list[DenseLayer]
    label_slots: int = 10
    version: int = 0  # bumped on every weight update; guards stale traces

    def mark_updated(self) -> None:
        self.version += 1

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].weight.shape[1]] + [
            layer.weight.shape[0] for layer in self.layers
        ]


@dataclass
class TrainConfig:
    theta: float = 2.0
    lambda0: float = 0.0
    lambda_step: float = 0.001
    lambda_max: float = math.inf
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.03
    precision: str = "fp32"  # "fp32" | "int8"
    lookahead_mode: str = "chained"  # "chained" | "detached"
    seed: int = 0
    goodness_skip_first_layer: bool = False
    weight_rounding: str = "nearest"  # "nearest" | "stochastic"
    eval_train_size: int = 1024  # train-accuracy subsample per epoch
    measure_wall: bool = False  # real wall_ms in metrics (breaks bitwise reruns)

    def validate(self) -> None:
        if not self.theta > 0:
            raise ConfigError(f"theta must be positive, got {self.theta}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.precision not in ("fp32", "int8"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.lookahead_mode not in ("chained", "detached"):
            raise ConfigError(f"unknown lookahead_mode {self.lookahead_mode!r}")
        if self.weight_rounding not in ("nearest", "stochastic"):
            raise ConfigError(f"unknown weight_rounding {self.weight_rounding!r}")


def init_model(
    widths: list[int],
    seed: int,
    label_slots: int = 10,
    normalize_inputs: bool = True,
) -> FFModel:
    """He-initialized stack of ReLU layers; input stays un-normalized,
    every later layer normalizes what it receives."""
    if len(widths) < 2:
        raise ConfigError("need at least input and one layer width")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAM_INIT,)))
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(
            DenseLayer(
                weight=w,
                bias=np.zeros(fan_out),
                normalize_input=normalize_inputs and i > 0,
            )
        )
    return FFModel(layers=layers, label_slots=label_slots)


# ---------------------------------------------------------------------------
# goodness and losses


def _softplus(z: np.ndarray | float) -> np.ndarray | float:
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z: np.ndarray | float) -> np.ndarray:
    # tanh form is stable for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def goodness(y: np.ndarray) -> float:
    """Sum of squared activations of one activation vector."""
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(y * y))


def goodness_rows(y: np.ndarray) -> np.ndarray:
    """Per-sample goodness of a (batch, width) activation matrix."""
    return np.einsum("ij,ij->i", y, y)


def loss_pos(g: np.ndarray | float, theta: float) -> np.ndarray | float:
    """softplus(theta - G): strictly decreasing in goodness."""
    out = _softplus(theta - np.asarray(g, dtype=np.float64))
    return float(out) if np.ndim(g) == 0 else out


def loss_neg(g: np.ndarray | float, theta: float) -> np.ndarray | float:
    """softplus(G - theta): strictly increasing in goodness."""
    out = _softplus(np.asarray(g, dtype=np.float64) - theta)
    return float(out) if np.ndim(g) == 0 else out


def _loss(g, theta: float, polarity: str):
    if polarity == "positive":
        return loss_pos(g, theta)
    if polarity == "negative":
        return loss_neg(g, theta)
    raise ConfigError(f"unknown polarity {polarity!r}")


def _dloss_dgoodness(g: np.ndarray, theta: float, polarity: str) -> np.ndarray:
    if polarity == "positive":
        return -_sigmoid(theta - g)
    if polarity == "negative":
        return _sigmoid(g - theta)
    raise ConfigError(f"unknown polarity {polarity!r}")


def lambda_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp of the look-ahead coefficient, optionally capped."""
    return min(cfg.lambda0 + cfg.lambda_step * epoch, cfg.lambda_max)


def lookahead_loss(
    goodness_by_layer: np.ndarray,
    layer_index: int,
    lam: float,
    theta: float,
    polarity: str,
) -> float:
    """Layer i's loss plus lam times the sum of all later layers' losses.

    Accepts per-layer goodness as shape (L,) or (L, batch); batch axes
    are averaged before combining.
    """
    g = np.asarray(goodness_by_layer, dtype=np.float64)
    if not 0 <= layer_index < g.shape[0]:
        raise IndexError(f"layer index {layer_index} out of range 0..{g.shape[0] - 1}")
    terms = np.atleast_1d(_loss(g, theta, polarity))
    if terms.ndim == 2:
        terms = terms.mean(axis=1)
    return float(terms[layer_index] + lam * terms[layer_index + 1 :].sum())


# ---------------------------------------------------------------------------
# forward pass


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


@dataclass
class LayerCache:
    x_norm: np.ndarray  # layer's GEMM input (after optional normalization)
    y: np.ndarray  # post-ReLU output
    q_input: QuantizedTensor | None = None  # int8 mode only


@dataclass
class ForwardTrace:
    """Retained activations and per-layer goodness of one forward pass."""

    model_version: int
    precision: str
    caches: list[LayerCache]
    goodness: np.ndarray  # (layers, batch)


def _quantize_layer_weight(
    layer: DenseLayer,
    counters: OpCounters,
    rng: QuantRng | None = None,
) -> QuantizedTensor:
    scale = compute_scale(layer.weight)
    if rng is not None:
        return quantize_stochastic(layer.weight, scale, rng, counters)
    return quantize_nearest(layer.weight, scale, counters)


def quantize_model_weights(
    model: FFModel,
    counters: OpCounters,
    rng: QuantRng | None = None,
) -> list[QuantizedTensor]:
    """INT8 copies of all master weights (one event per step, shared by
    every pass until the next update)."""
    return [_quantize_layer_weight(layer, counters, rng) for layer in model.layers]


def _forward_layer(
    layer: DenseLayer,
    x: np.ndarray,
    precision: str,
    counters: OpCounters,
    rng: QuantRng | None,
    qw: QuantizedTensor | None,
) -> LayerCache:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
        raise ShapeError(
            f"input {x.shape} incompatible with weight {layer.weight.shape}"
        )
    xn = _normalize_rows(x) if layer.normalize_input else x
    batch, fan_out = x.shape[0], layer.weight.shape[0]
    q_input = None
    if precision == "int8":
        s_x = compute_scale(xn)
        if rng is not None:
            q_input = quantize_stochastic(xn, s_x, rng, counters)
        else:
            q_input = quantize_nearest(xn, s_x, counters)
        acc = int8_matmul(q_input, qw.transposed(), counters)
        z = acc.astype(np.float64) * (q_input.scale * qw.scale) + layer.bias
    else:
        z = xn @ layer.weight.T + layer.bias
        counters.add_fp32_mac(batch * fan_out * layer.weight.shape[1])
    y = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return LayerCache(x_norm=xn, y=y, q_input=q_input)


def layer_forward(
    layer: DenseLayer,
    x: np.ndarray,
    precision: str,
    counters: OpCounters,
    rng: QuantRng | None = None,
) -> np.ndarray:
    """One layer's forward pass; quantizes its own weight copy in int8 mode."""
    qw = None
    if precision == "int8":
        qw = _quantize_layer_weight(layer, counters)
    return _forward_layer(layer, x, precision, counters, rng, qw).y


def forward_pass(
    model: FFModel,
    x: np.ndarray,
    precision: str,
    counters: OpCounters,
    rng: QuantRng | None = None,
    q_weights: list[QuantizedTensor] | None = None,
) -> ForwardTrace:
    """Full forward pass retaining activations for gradient computation."""
    if precision == "int8" and q_weights is None:
        q_weights = quantize_model_weights(model, counters)
    caches = []
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(model.layers):
        cache = _forward_layer(
            layer, h, precision, counters, rng, q_weights[i] if q_weights else None
        )
        caches.append(cache)
        h = cache.y
    good = np.stack([goodness_rows(c.y) for c in caches])
    return ForwardTrace(
        model_version=model.version, precision=precision, caches=caches, goodness=good
    )


# ---------------------------------------------------------------------------
# gradients


def _grad_from_cache(
    cache: LayerCache,
    dldy: np.ndarray,
    precision: str,
    counters: OpCounters,
    rng: QuantRng | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean-loss weight/bias gradients given dL/dy of one layer.

    The ReLU chain is the y > 0 mask. In int8 mode the output gradient
    is quantized and the weight gradient runs through the integer
    kernel against the forward pass's quantized input; the input
    gradient is never formed here.
    """
    gz = np.where(cache.y > 0.0, dldy, 0.0)
    batch = gz.shape[0]
    if precision == "int8":
        s_g = compute_scale(gz)
        if rng is not None:
            qg = quantize_stochastic(gz, s_g, rng, counters)
        else:
            qg = quantize_nearest(gz, s_g, counters)
        acc = int8_matmul(qg.transposed(), cache.q_input, counters)
        gw = acc.astype(np.float64) * (s_g * cache.q_input.scale) / batch
    else:
        gw = gz.T @ cache.x_norm / batch
        counters.add_fp32_mac(gz.shape[1] * cache.x_norm.shape[1] * batch)
    gb = gz.mean(axis=0)
    return gw, gb


def local_gradient(
    layer: DenseLayer,
    x_batch: np.ndarray,
    polarity: str,
    theta: float,
    precision: str,
    counters: OpCounters,
    rng: QuantRng | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the layer's own mean goodness loss w.r.t. W and b."""
    qw = None
    if precision == "int8":
        qw = _quantize_layer_weight(layer, counters)
    cache = _forward_layer(layer, x_batch, precision, counters, rng, qw)
    g = goodness_rows(cache.y)
    dldy = 2.0 * _dloss_dgoodness(g, theta, polarity)[:, None] * cache.y
    return _grad_from_cache(cache, dldy, precision, counters, rng)


def _normalization_backprop(
    g_xnorm: np.ndarray, x_norm: np.ndarray, pre_norm: np.ndarray
) -> np.ndarray:
    """Pull a gradient back through per-row L2 normalization.

    Rows that were exactly zero before normalization pass no gradient
    (the map is treated as locally constant there).
    """
    norms = np.linalg.norm(pre_norm, axis=1, keepdims=True)
    inner = np.einsum("ij,ij->i", g_xnorm, x_norm)[:, None]
    out = (g_xnorm - inner * x_norm) / np.where(norms == 0.0, 1.0, norms)
    return np.where(norms == 0.0, 0.0, out)


def lookahead_gradient(
    model: FFModel,
    trace: ForwardTrace,
    layer_index: int,
    lam: float,
    theta: float,
    polarity: str,
    mode: str,
    precision: str,
    counters: OpCounters,
    rng: QuantRng | None = None,
    q_weights: list[QuantizedTensor] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of layer i's combined loss w.r.t. its own W and b.

    chained: later-layer losses are reverse-accumulated through the
    forward computations (including input normalization) down to layer
    i's output, then scaled by lam. detached: later-layer terms are
    constants, so the result equals the local gradient.
    """
    if trace.model_version != model.version:
        raise StaleForward("forward trace predates a weight update")
    n_layers = len(model.layers)
    if not 0 <= layer_index < n_layers:
        raise IndexError(f"layer index {layer_index} out of range")
    caches = trace.caches
    cache_i = caches[layer_index]
    dldy = (
        2.0
        * _dloss_dgoodness(trace.goodness[layer_index], theta, polarity)[:, None]
        * cache_i.y
    )
    if mode == "chained" and lam != 0.0 and layer_index < n_layers - 1:
        carried = None  # d(sum of later losses)/dy_j while sweeping down
        for j in range(n_layers - 1, layer_index, -1):
            term = (
                2.0
                * _dloss_dgoodness(trace.goodness[j], theta, polarity)[:, None]
                * caches[j].y
            )
            flowing = term if carried is None else term + carried
            gz = np.where(caches[j].y > 0.0, flowing, 0.0)
            layer_j = model.layers[j]
            if precision == "int8":
                s_g = compute_scale(gz)
                if rng is not None:
                    qg = quantize_stochastic(gz, s_g, rng, counters)
                else:
                    qg = quantize_nearest(gz, s_g, counters)
                qw = (
                    q_weights[j]
                    if q_weights is not None
                    else _quantize_layer_weight(layer_j, counters)
                )
                acc = int8_matmul(qg, qw, counters)
                g_input = acc.astype(np.float64) * (s_g * qw.scale)
            else:
                g_input = gz @ layer_j.weight
                counters.add_fp32_mac(gz.shape[0] * gz.shape[1] * layer_j.weight.shape[1])
            if layer_j.normalize_input:
                carried = _normalization_backprop(
                    g_input, caches[j].x_norm, caches[j - 1].y
                )
            else:
                carried = g_input
        dldy = dldy + lam * carried
    return _grad_from_cache(cache_i, dldy, precision, counters, rng)


# ---------------------------------------------------------------------------
# prediction


def predict_batch(
    model: FFModel,
    pixels: np.ndarray,
    cfg: TrainConfig,
    chunk: int = 4096,
) -> np.ndarray:
    """Label scores = goodness summed over hidden layers per candidate
    embedding; ties resolve to the lowest label index. Deterministic:
    int8 inference uses nearest rounding."""
    pixels = np.asarray(pixels, dtype=np.float64)
    scratch = OpCounters()
    q_weights = (
        quantize_model_weights(model, scratch) if cfg.precision == "int8" else None
    )
    first_scored = 1 if cfg.goodness_skip_first_layer else 0
    out = np.empty(pixels.shape[0], dtype=np.int64)
    for start in range(0, pixels.shape[0], chunk):
        rows = pixels[start : start + chunk]
        scores = np.zeros((rows.shape[0], model.label_slots))
        for label in range(model.label_slots):
            h = data_mod.embed_batch(rows, label, model.label_slots)
            for i, layer in enumerate(model.layers):
                h = _forward_layer(
                    layer,
                    h,
                    cfg.precision,
                    scratch,
                    None,
                    q_weights[i] if q_weights else None,
                ).y
                if i >= first_scored:
                    scores[:, label] += goodness_rows(h)
        out[start : start + chunk] = np.argmax(scores, axis=1)
    return out


def predict(model: FFModel, image: np.ndarray, cfg: TrainConfig) -> int:
    """Single-image argmax-goodness label."""
    return int(predict_batch(model, np.asarray(image)[None, :], cfg)[0])


def evaluate_accuracy(
    model: FFModel, pixels: np.ndarray, labels: np.ndarray, cfg: TrainConfig
) -> float:
    preds = predict_batch(model, pixels, cfg)
    return float(np.mean(preds == np.asarray(labels)))


# ---------------------------------------------------------------------------
# trainers


def _check_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise NumericFailure(f"{name} produced a non-finite loss: {v}")


def _epoch_metrics(
    model: FFModel,
    dataset: data_mod.Dataset,
    cfg: TrainConfig,
    log: MetricsLog,
    epoch: int,
    mean_lp: float,
    mean_ln: float,
    lam: float | None,
    train_wall_ms: float,
    counter_delta: dict[str, int],
) -> None:
    t0 = time.perf_counter()
    n_sub = min(cfg.eval_train_size, len(dataset.train))
    train_acc = None
    if n_sub > 0:
        sub = np.arange(n_sub)
        train_acc = evaluate_accuracy(
            model, dataset.train.pixels(sub), dataset.train.labels[sub], cfg
        )
    test_acc = evaluate_accuracy(
        model, dataset.test.pixels(), dataset.test.labels, cfg
    )
    eval_ms = (time.perf_counter() - t0) * 1000.0
    log.append(
        MetricsRow(
            epoch=epoch,
            split="train",
            accuracy=train_acc,
            mean_loss_pos=mean_lp,
            mean_loss_neg=mean_ln,
            lambda_=lam,
            wall_ms=train_wall_ms if cfg.measure_wall else 0.0,
            counter_delta=counter_delta,
        )
    )
    log.append(
        MetricsRow(
            epoch=epoch,
            split="test",
            accuracy=test_acc,
            lambda_=lam,
            wall_ms=eval_ms if cfg.measure_wall else 0.0,
        )
    )


def _batch_starts(n: int, batch: int) -> range:
    return range(0, n, batch)


def make_pos_neg_batches(px, labels, rng, label_slots):
    pos, neg = data_mod.make_pos_neg(px, labels, rng, label_slots)
    return pos.vectors, neg.vectors


def train_ff_vanilla(
    model: FFModel,
    dataset: data_mod.Dataset,
    cfg: TrainConfig,
    counters: OpCounters,
) -> tuple[FFModel, MetricsLog]:
    """Greedy layer-by-layer training: each layer runs cfg.epochs epochs
    of local-gradient SGD while everything before it stays frozen.
    Metrics rows use the cumulative epoch index across phases."""
    cfg.validate()
    data_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(_STREAM_DATA,))
    )
    qrng = QuantRng(cfg.seed, stream=_STREAM_QUANT)
    log = MetricsLog()
    labels = dataset.train.labels
    n = len(dataset.train)
    epoch_global = 0
    for li, layer in enumerate(model.layers):
        # frozen-prefix weights do not change during this phase, so their
        # nearest-rounded copies are computed once (bit-identical reuse)
        prefix_qw = None
        stochastic_weights = cfg.weight_rounding == "stochastic"
        if cfg.precision == "int8" and not stochastic_weights:
            prefix_qw = [
                _quantize_layer_weight(model.layers[j], counters) for j in range(li)
            ]
        for _ in range(cfg.epochs):
            t0 = time.perf_counter()
            before = counters.snapshot()
            perm = data_rng.permutation(n)
            sum_lp = sum_ln = 0.0
            n_batches = 0
            for start in _batch_starts(n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                px = dataset.train.pixels(idx)
                pos, neg = make_pos_neg_batches(px, labels[idx], data_rng, model.label_slots)
                if cfg.precision == "int8" and stochastic_weights:
                    prefix_qw = [
                        _quantize_layer_weight(model.layers[j], counters, qrng)
                        for j in range(li)
                    ]
                x_pos = _forward_prefix(model, pos, li, cfg, counters, qrng, prefix_qw)
                x_neg = _forward_prefix(model, neg, li, cfg, counters, qrng, prefix_qw)
                qw = None
                if cfg.precision == "int8":
                    qw = _quantize_layer_weight(
                        layer, counters, qrng if stochastic_weights else None
                    )
                gwp, gbp, lp = _local_step(
                    layer, x_pos, "positive", cfg, counters, qrng, qw
                )
                gwn, gbn, ln = _local_step(
                    layer, x_neg, "negative", cfg, counters, qrng, qw
                )
                layer.weight -= cfg.learning_rate * (gwp + gwn)
                layer.bias -= cfg.learning_rate * (gbp + gbn)
                model.mark_updated()
                sum_lp += lp
                sum_ln += ln
                n_batches += 1
            mean_lp, mean_ln = sum_lp / n_batches, sum_ln / n_batches
            _check_finite("train_ff_vanilla", mean_lp, mean_ln)
            _epoch_metrics(
                model,
                dataset,
                cfg,
                log,
                epoch_global,
                mean_lp,
                mean_ln,
                None,
                (time.perf_counter() - t0) * 1000.0,
                counters.delta_since(before).as_dict(),
            )
            epoch_global += 1
    return model, log


def _forward_prefix(
    model: FFModel,
    x: np.ndarray,
    upto: int,
    cfg: TrainConfig,
    counters: OpCounters,
    qrng: QuantRng,
    prefix_qw: list[QuantizedTensor] | None,
) -> np.ndarray:
    """Input that layer ``upto`` receives: x pushed through frozen layers."""
    h = x
    for j in range(upto):
        h = _forward_layer(
            model.layers[j],
            h,
            cfg.precision,
            counters,
            qrng if cfg.precision == "int8" else None,
            prefix_qw[j] if prefix_qw is not None else None,
        ).y
    return h


def _local_step(
    layer: DenseLayer,
    x: np.ndarray,
    polarity: str,
    cfg: TrainConfig,
    counters: OpCounters,
    qrng: QuantRng,
    qw: QuantizedTensor | None,
) -> tuple[np.ndarray, np.ndarray, float]:
    rng = qrng if cfg.precision == "int8" else None
    cache = _forward_layer(layer, x, cfg.precision, counters, rng, qw)
    g = goodness_rows(cache.y)
    loss = float(np.mean(_loss(g, cfg.theta, polarity)))
    dldy = 2.0 * _dloss_dgoodness(g, cfg.theta, polarity)[:, None] * cache.y
    gw, gb = _grad_from_cache(cache, dldy, cfg.precision, counters, rng)
    return gw, gb, loss


def train_ff_lookahead(
    model: FFModel,
    dataset: data_mod.Dataset,
    cfg: TrainConfig,
    counters: OpCounters,
) -> tuple[FFModel, MetricsLog]:
    """One forward pass per batch updates every layer (all master weights
    stay resident); the look-ahead coefficient follows lambda_schedule."""
    cfg.validate()
    data_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(_STREAM_DATA,))
    )
    qrng = QuantRng(cfg.seed, stream=_STREAM_QUANT)
    log = MetricsLog()
    labels = dataset.train.labels
    n = len(dataset.train)
    n_layers = len(model.layers)
    for epoch in range(cfg.epochs):
        lam = lambda_schedule(epoch, cfg)
        t0 = time.perf_counter()
        before = counters.snapshot()
        perm = data_rng.permutation(n)
        sum_lp = sum_ln = 0.0
        n_batches = 0
        for start in _batch_starts(n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            px = dataset.train.pixels(idx)
            pos, neg = make_pos_neg_batches(px, labels[idx], data_rng, model.label_slots)
            rng = qrng if cfg.precision == "int8" else None
            q_weights = None
            if cfg.precision == "int8":
                q_weights = quantize_model_weights(
                    model,
                    counters,
                    qrng if cfg.weight_rounding == "stochastic" else None,
                )
            trace_pos = forward_pass(model, pos, cfg.precision, counters, rng, q_weights)
            trace_neg = forward_pass(model, neg, cfg.precision, counters, rng, q_weights)
            updates = []
            for i in range(n_layers):
                gwp, gbp = lookahead_gradient(
                    model, trace_pos, i, lam, cfg.theta, "positive",
                    cfg.lookahead_mode, cfg.precision, counters, rng, q_weights,
                )
                gwn, gbn = lookahead_gradient(
                    model, trace_neg, i, lam, cfg.theta, "negative",
                    cfg.lookahead_mode, cfg.precision, counters, rng, q_weights,
                )
                updates.append((gwp + gwn, gbp + gbn))
            for layer, (gw, gb) in zip(model.layers, updates):
                layer.weight -= cfg.learning_rate * gw
                layer.bias -= cfg.learning_rate * gb
            model.mark_updated()
            sum_lp += float(np.mean(loss_pos(trace_pos.goodness, cfg.theta)))
            sum_ln += float(np.mean(loss_neg(trace_neg.goodness, cfg.theta)))
            n_batches += 1
        mean_lp, mean_ln = sum_lp / n_batches, sum_ln / n_batches
        _check_finite("train_ff_lookahead", mean_lp, mean_ln)
        _epoch_metrics(
            model,
            dataset,
            cfg,
            log,
            epoch,
            mean_lp,
            mean_ln,
            lam,
            (time.perf_counter() - t0) * 1000.0,
            counters.delta_since(before).as_dict(),
        )
    return model, log


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: FFModel, config_echo: dict) -> None:
    """Versioned npz container: weights, biases, layer flags, config echo.

    Arrays round-trip bitwise; metadata rides along as UTF-8 JSON.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "label_slots": model.label_slots,
        "n_layers": len(model.layers),
        "normalize_input": [layer.normalize_input for layer in model.layers],
        "activation": [layer.activation for layer in model.layers],
        "config": config_echo,
    }
    arrays = {"__meta__": np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )}
    for i, layer in enumerate(model.layers):
        arrays[f"weight_{i}"] = layer.weight
        arrays[f"bias_{i}"] = layer.bias
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[FFModel, dict]:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(
                f"checkpoint format {meta['format_version']} unsupported"
            )
        layers = [
            DenseLayer(
                weight=archive[f"weight_{i}"],
                bias=archive[f"bias_{i}"],
                normalize_input=meta["normalize_input"][i],
                activation=meta["activation"][i],
            )
            for i in range(meta["n_layers"])
        ]
    model = FFModel(layers=layers, label_slots=meta["label_slots"])
    return model, meta


def config_echo(cfg: TrainConfig) -> dict:
    echo = asdict(cfg)
    echo["lambda_max"] = None if math.isinf(cfg.lambda_max) else cfg.lambda_max
    return echo
