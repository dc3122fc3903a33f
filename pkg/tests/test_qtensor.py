"""Quantizer and integer-matmul kernel tests.

The matmul oracle is an independent int64 einsum; the stochastic
quantizer is checked against the two-point distribution it is defined
by (Monte-Carlo mean within a few standard errors).
"""

import numpy as np
import pytest

from ffint8.counters import OpCounters
from ffint8.errors import InvalidScale, InvalidTensor, OverflowRisk, ShapeError
from ffint8.qtensor import (
    QuantRng,
    QuantizedTensor,
    compute_scale,
    dequantize,
    int8_matmul,
    quantize_nearest,
    quantize_stochastic,
)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference product in 64-bit integers, no shared code with the kernel."""
    return np.einsum("ik,kj->ij", a.astype(np.int64), b.astype(np.int64))


class TestComputeScale:
    def test_formula(self):
        assert compute_scale(np.array([1.27, -1.27, 0.0])) == pytest.approx(0.01)
        assert compute_scale(np.array([3.0])) == pytest.approx(3.0 / 127)

    def test_all_zero_convention(self):
        assert compute_scale(np.zeros(2)) == 1.0

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidTensor):
            compute_scale(np.array([1.0, np.nan]))
        with pytest.raises(InvalidTensor):
            compute_scale(np.array([np.inf]))


class TestStochasticRounding:
    def test_on_grid_is_deterministic(self):
        rng = QuantRng(1)
        q = quantize_stochastic(np.array([0.02]), 0.01, rng)
        assert q.data[0] == 2

    def test_midpoint_splits_evenly(self):
        rng = QuantRng(7)
        x = np.full(20000, 0.005)
        q = quantize_stochastic(x, 0.01, rng)
        assert set(np.unique(q.data)) == {0, 1}
        frac_up = np.mean(q.data == 1)
        # binomial with p=0.5: 4 sigma over 20000 draws
        assert abs(frac_up - 0.5) < 4 * 0.5 / np.sqrt(20000)

    def test_unbiased_mean(self):
        # mean of output*scale must sit within 3 standard errors of x;
        # the two-point distribution has std <= scale/2
        n = 100_000
        rng = QuantRng(123)
        x = np.full(n, 0.0037)
        q = quantize_stochastic(x, 0.01, rng)
        mean = float(np.mean(dequantize(q)))
        assert abs(mean - 0.0037) <= 3 * (0.01 * 0.5 / np.sqrt(n))

    def test_unbiased_at_4_sigma_random_values(self):
        n = 100_000
        draws = QuantRng(55)
        for x in [-1.2345, 0.00071, 0.9999]:
            q = quantize_stochastic(np.full(n, x), 0.01, draws)
            mean = float(np.mean(dequantize(q)))
            assert abs(mean - x) <= 4 * (0.01 * 0.5 / np.sqrt(n)), x

    def test_bounded_error(self):
        rng = QuantRng(9)
        gen = np.random.default_rng(0)
        x = gen.uniform(-1.2, 1.2, 5000)
        q = quantize_stochastic(x, 0.01, rng)
        assert np.all(np.abs(dequantize(q) - x) <= 0.01 + 1e-12)

    def test_never_produces_minus_128(self):
        rng = QuantRng(3)
        x = np.linspace(-50.0, 50.0, 10001)  # far out of range, clamps hard
        q = quantize_stochastic(x, 0.01, rng)
        assert q.data.min() >= -127

    def test_same_seed_same_output(self):
        gen = np.random.default_rng(4)
        x = gen.normal(size=(33, 17))
        qa = quantize_stochastic(x, 0.013, QuantRng(42))
        qb = quantize_stochastic(x, 0.013, QuantRng(42))
        assert np.array_equal(qa.data, qb.data)

    def test_streams_are_independent_of_draw_sizes(self):
        # the second tensor's draws do not depend on the first tensor's size
        x = np.full(100, 0.5)
        r1 = QuantRng(11)
        quantize_stochastic(np.zeros(7), 1.0, r1)
        a = quantize_stochastic(x, 0.013, r1)
        r2 = QuantRng(11)
        quantize_stochastic(np.zeros(9000), 1.0, r2)
        b = quantize_stochastic(x, 0.013, r2)
        assert np.array_equal(a.data, b.data)

    def test_rejects_bad_scale(self):
        with pytest.raises(InvalidScale):
            quantize_stochastic(np.ones(3), 0.0, QuantRng(0))
        with pytest.raises(InvalidScale):
            quantize_stochastic(np.ones(3), -1.0, QuantRng(0))


class TestNearestRounding:
    def test_examples(self):
        assert quantize_nearest(np.array([0.014]), 0.01).data[0] == 1
        assert quantize_nearest(np.array([-5.0]), 0.01).data[0] == -127
        # halves round away from zero
        assert quantize_nearest(np.array([0.015]), 0.01).data[0] == 2
        assert quantize_nearest(np.array([-0.015]), 0.01).data[0] == -2

    def test_half_step_error_bound(self):
        gen = np.random.default_rng(1)
        x = gen.uniform(-1.26, 1.26, 5000)
        q = quantize_nearest(x, 0.01)
        assert np.all(np.abs(dequantize(q) - x) <= 0.005 + 1e-12)

    def test_counts_quantize_events(self):
        c = OpCounters()
        quantize_nearest(np.ones((4, 5)), 0.5, counters=c)
        assert c.cmp32 == 20 and c.fp32_fadd == 40 and c.int8_mul == 0


class TestDequantize:
    def test_exact_values(self):
        q = QuantizedTensor(np.array([127], dtype=np.int8), 0.01)
        assert dequantize(q)[0] == pytest.approx(1.27)
        q0 = QuantizedTensor(np.array([0], dtype=np.int8), 123.0)
        assert dequantize(q0)[0] == 0.0

    def test_round_trip_within_half_step(self):
        gen = np.random.default_rng(2)
        x = gen.normal(size=400)
        s = compute_scale(x)
        back = dequantize(quantize_nearest(x, s))
        assert np.all(np.abs(back - np.clip(x, -127 * s, 127 * s)) <= s / 2 + 1e-12)


class TestInt8Matmul:
    def test_hand_example(self):
        a = QuantizedTensor(np.array([[1, 2], [3, 4]], dtype=np.int8), 1.0)
        b = QuantizedTensor(np.array([[5], [6]], dtype=np.int8), 1.0)
        c = OpCounters()
        out = int8_matmul(a, b, c)
        assert out.tolist() == [[17], [39]]
        assert out.dtype == np.int32
        assert c.int8_mul == 4 and c.int8_add == 4

    def test_identity_widens(self):
        gen = np.random.default_rng(3)
        q = QuantizedTensor(gen.integers(-127, 128, (5, 5)).astype(np.int8), 0.02)
        eye = QuantizedTensor(np.eye(5, dtype=np.int8), 1.0)
        out = int8_matmul(eye, q, OpCounters())
        assert np.array_equal(out, q.data.astype(np.int32))

    def test_matches_int64_oracle_small(self):
        gen = np.random.default_rng(4)
        a = gen.integers(-127, 128, (7, 5)).astype(np.int8)
        b = gen.integers(-127, 128, (5, 3)).astype(np.int8)
        out = int8_matmul(QuantizedTensor(a, 1.0), QuantizedTensor(b, 1.0), OpCounters())
        assert np.array_equal(out.astype(np.int64), matmul_oracle(a, b))

    def test_matches_int64_oracle_1000_shapes(self):
        gen = np.random.default_rng(1234)
        for _ in range(1000):
            m, k, n = gen.integers(1, 17, size=3)
            a = gen.integers(-127, 128, (m, k)).astype(np.int8)
            b = gen.integers(-127, 128, (k, n)).astype(np.int8)
            out = int8_matmul(
                QuantizedTensor(a, 1.0), QuantizedTensor(b, 1.0), OpCounters()
            )
            assert np.array_equal(out.astype(np.int64), matmul_oracle(a, b))

    def test_worst_case_accumulation_is_exact(self):
        # K chosen so the exact sum approaches the int32 bound
        k = 4096
        a = QuantizedTensor(np.full((1, k), 127, dtype=np.int8), 1.0)
        b = QuantizedTensor(np.full((k, 1), 127, dtype=np.int8), 1.0)
        out = int8_matmul(a, b, OpCounters())
        assert out[0, 0] == 127 * 127 * k

    def test_shape_and_overflow_errors(self):
        a = QuantizedTensor(np.zeros((2, 3), dtype=np.int8), 1.0)
        b = QuantizedTensor(np.zeros((4, 2), dtype=np.int8), 1.0)
        with pytest.raises(ShapeError):
            int8_matmul(a, b, OpCounters())
        big_a = QuantizedTensor(np.zeros((1, 130001), dtype=np.int8), 1.0)
        big_b = QuantizedTensor(np.zeros((130001, 1), dtype=np.int8), 1.0)
        with pytest.raises(OverflowRisk):
            int8_matmul(big_a, big_b, OpCounters())


class TestKernelPaths:
    def test_fused_kernels_match_numpy_fallback(self, monkeypatch):
        import ffint8.qtensor as qt

        if not qt._HAVE_NUMBA:
            pytest.skip("numba not installed; only the fallback path exists")
        gen = np.random.default_rng(6)
        x = gen.normal(size=(37, 53)) * 3
        s = compute_scale(x)
        fast_n = quantize_nearest(x, s)
        fast_s = quantize_stochastic(x, s, QuantRng(5))
        monkeypatch.setattr(qt, "_HAVE_NUMBA", False)
        slow_n = quantize_nearest(x, s)
        slow_s = quantize_stochastic(x, s, QuantRng(5))
        assert np.array_equal(fast_n.data, slow_n.data)
        assert np.array_equal(fast_s.data, slow_s.data)


class TestCounters:
    def test_merge_equals_single_threaded(self):
        total = OpCounters()
        shard_a, shard_b = OpCounters(), OpCounters()
        gen = np.random.default_rng(5)
        mats = [gen.integers(-127, 128, (4, 6)).astype(np.int8) for _ in range(4)]
        for i, (x, y) in enumerate([(0, 1), (2, 3)]):
            a = QuantizedTensor(mats[x], 1.0)
            b = QuantizedTensor(mats[y].T.copy(), 1.0)
            int8_matmul(a, b, total)
            int8_matmul(a, b, shard_a if i == 0 else shard_b)
        shard_a.merge(shard_b)
        assert shard_a == total

    def test_delta_since(self):
        c = OpCounters()
        c.add_quantize(10)
        before = c.snapshot()
        c.add_int8_mac(7)
        d = c.delta_since(before)
        assert d.int8_mul == 7 and d.cmp32 == 0
