"""Symmetric per-tensor INT8 quantization and exact integer matmul.

Quantized values live in the symmetric range [-127, 127]; the encoding
-128 is never produced, so negation stays closed and a single positive
scale describes the grid. Stochastic rounding draws come from
counter-based streams so that a run is reproducible from its seed alone.

The integer matmul accumulates in 32 bits. Every per-term product is
bounded by 127^2 = 16129, so any partial sum of K terms is bounded by
K * 16129; the kernel rejects K above 130000, which keeps the worst
case (about 2.097e9) inside the int32 range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counters import OpCounters
from .errors import InvalidScale, InvalidTensor, OverflowRisk, ShapeError

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

QMAX = 127
K_MAX = 130000

_MASK64 = (1 << 64) - 1


if _HAVE_NUMBA:
    # fused single-pass kernels; float64 arithmetic matches the numpy
    # fallback bit for bit, they just avoid the 6-pass memory traffic

    @numba.njit(cache=True)
    def _nearest_kernel(flat, inv_scale, out):  # pragma: no cover - jit
        for i in range(flat.size):
            u = flat[i] * inv_scale
            mag = np.floor(abs(u) + 0.5)
            if mag > 127.0:
                mag = 127.0
            out[i] = np.int8(-mag if u < 0 else mag)

    @numba.njit(cache=True)
    def _stochastic_kernel(flat, inv_scale, uniforms, out):  # pragma: no cover
        for i in range(flat.size):
            u = flat[i] * inv_scale
            lo = np.floor(u)
            q = lo + (1.0 if uniforms[i] < u - lo else 0.0)
            if q > 127.0:
                q = 127.0
            elif q < -127.0:
                q = -127.0
            out[i] = np.int8(q)


@dataclass
class QuantizedTensor:
    """INT8 payload plus the positive real scale of its grid."""

    data: np.ndarray  # int8
    scale: float
    _f64: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def f64(self) -> np.ndarray:
        """Widened copy for the GEMM kernel, computed once per tensor."""
        if self._f64 is None:
            self._f64 = self.data.astype(np.float64)
        return self._f64

    def transposed(self) -> "QuantizedTensor":
        out = QuantizedTensor(self.data.T, self.scale)
        out._f64 = self.f64().T  # view, shares the parent's conversion
        return out


class QuantRng:
    """Counter-based uniform streams for stochastic rounding.

    Each quantized tensor consumes one Philox substream keyed by
    (seed, stream, serial); element i of the tensor uses draw i of that
    substream. Streams are independent, so two QuantRng objects with
    different ``stream`` ids never correlate, and a substream's draws do
    not depend on how large earlier tensors were.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= stream < 1 << 15:
            raise ValueError(f"stream id out of range: {stream}")
        self._seed = seed & _MASK64
        self._stream = stream
        self._serial = 0
        self._bitgen = np.random.Philox(key=0)
        self._gen = np.random.Generator(self._bitgen)

    def spawn(self, stream: int) -> "QuantRng":
        """Independent stream under the same seed (e.g. per trainer phase)."""
        return QuantRng(self._seed, stream)

    def uniforms(self, n: int) -> np.ndarray:
        # re-key the shared Philox in place: one substream per tensor
        state = self._bitgen.state
        state["state"]["counter"][:] = 0
        state["state"]["key"][0] = self._seed
        state["state"]["key"][1] = ((self._stream << 48) | self._serial) & _MASK64
        state["buffer_pos"] = 4  # discard any buffered randoms
        state["has_uint32"] = 0
        state["uinteger"] = 0
        self._bitgen.state = state
        self._serial += 1
        return self._gen.random(n)


def compute_scale(t: np.ndarray) -> float:
    """Per-tensor symmetric scale: max|t| / 127, or 1.0 for all zeros."""
    t = np.asarray(t)
    # max|t| without temporaries; NaN/Inf anywhere propagates into peak
    peak = max(float(t.max()), -float(t.min())) if t.size else 0.0
    if not np.isfinite(peak):
        raise InvalidTensor("tensor contains NaN or Inf")
    if peak == 0.0:
        return 1.0
    return peak / QMAX


def quantize_stochastic(
    t: np.ndarray,
    scale: float,
    rng: QuantRng,
    counters: OpCounters | None = None,
) -> QuantizedTensor:
    """Quantize with stochastic rounding: floor(u)+1 w.p. frac(u).

    The expectation of ``output * scale`` equals the input clamped to
    the representable range, which is what keeps accumulated rounding
    error unbiased over many steps.
    """
    if not scale > 0.0:
        raise InvalidScale(f"scale must be positive, got {scale}")
    t = np.asarray(t, dtype=np.float64)
    uniforms = rng.uniforms(t.size)
    if _HAVE_NUMBA:
        q = np.empty(t.size, dtype=np.int8)
        _stochastic_kernel(np.ascontiguousarray(t).ravel(), 1.0 / scale, uniforms, q)
        q = q.reshape(t.shape)
    else:
        u = t * (1.0 / scale)
        lo = np.floor(u)
        frac = u
        np.subtract(u, lo, out=frac)
        bump = uniforms.reshape(t.shape) < frac
        np.add(lo, bump, out=lo)
        np.clip(lo, -QMAX, QMAX, out=lo)
        q = lo.astype(np.int8)
    if counters is not None:
        counters.add_quantize(t.size)
    return QuantizedTensor(q, float(scale))


def quantize_nearest(
    t: np.ndarray,
    scale: float,
    counters: OpCounters | None = None,
) -> QuantizedTensor:
    """Deterministic quantization, rounding halves away from zero."""
    if not scale > 0.0:
        raise InvalidScale(f"scale must be positive, got {scale}")
    t = np.asarray(t, dtype=np.float64)
    if _HAVE_NUMBA:
        q = np.empty(t.size, dtype=np.int8)
        _nearest_kernel(np.ascontiguousarray(t).ravel(), 1.0 / scale, q)
        q = q.reshape(t.shape)
    else:
        # half-away-from-zero as sign(u) * floor(|u| + 0.5)
        u = t * (1.0 / scale)
        mag = np.abs(u)
        np.add(mag, 0.5, out=mag)
        np.floor(mag, out=mag)
        np.clip(mag, 0, QMAX, out=mag)
        np.copysign(mag, u, out=mag)
        q = mag.astype(np.int8)
    if counters is not None:
        counters.add_quantize(t.size)
    return QuantizedTensor(q, float(scale))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Map integers back to reals; exact for the |v| <= 127 payload."""
    return q.data.astype(np.float64) * q.scale


def int8_matmul(
    a: QuantizedTensor, b: QuantizedTensor, counters: OpCounters
) -> np.ndarray:
    """Exact INT8 x INT8 -> INT32 matmul; logical scale a.scale * b.scale.

    Internally runs as a float64 GEMM: every partial sum is an integer
    bounded by K_MAX * 16129 < 2^53, so float64 arithmetic is exact and
    the cast back to int32 loses nothing. Counts M*N*K MULs and ADDs.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"int8_matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    m, k = a.data.shape
    kb, n = b.data.shape
    if k != kb:
        raise ShapeError(f"inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    if k > K_MAX:
        raise OverflowRisk(f"K={k} exceeds {K_MAX}; int32 accumulation not guaranteed")
    acc = a.f64() @ b.f64()
    counters.add_int8_mac(m * n * k)
    return acc.astype(np.int32)
