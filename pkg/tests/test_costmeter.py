"""Analytic cost model vs instrumented trainer runs.

The parity tests are exact: a one-batch training step must hit the
counters with precisely the numbers the closed form predicts, for
every kernel path.
"""

import numpy as np
import pytest

from ffint8.counters import OpCounters
from ffint8.costmeter import ArchSpec, analytic_counts, cost_report, mac_count
from ffint8.bpref import init_bp_model, train_bp
from ffint8.data import Dataset, LabeledImages
from ffint8.errors import ConfigError
from ffint8.ffcore import TrainConfig, init_model, train_ff_lookahead


def tiny_dataset(in_width, batch, slots, seed):
    gen = np.random.default_rng(seed)
    raw = gen.integers(0, 256, (batch, in_width), dtype=np.uint8)
    labels = gen.integers(0, slots, batch).astype(np.int64)
    imgs = LabeledImages(raw=raw, labels=labels)
    return Dataset(train=imgs, test=LabeledImages(raw[:1], labels[:1]))


class TestAnalyticCounts:
    def test_hand_counted_bp_single_cell(self):
        c = analytic_counts(ArchSpec(widths=[1, 1], batch=1, mode="bp_fp32"))
        # forward 1 MAC + weight-grad 1 MAC, no activation-gradient GEMM
        assert c.fp32_fmul == 2 and c.fp32_fadd == 2
        assert c.int8_mul == 0 and c.cmp32 == 0

    def test_ff_counts_both_polar_passes(self):
        c = analytic_counts(ArchSpec(widths=[3, 2], batch=4, mode="ff_int8"))
        # forward + weight-grad GEMM per pass: 4 * (4*3*2) MACs
        assert c.int8_mul == c.int8_add == 4 * 4 * 3 * 2
        # quantized: weights 6, plus per pass inputs 4*3 and gradients 4*2
        assert c.cmp32 == 6 + 2 * (12 + 8)
        assert c.fp32_fadd == 2 * c.cmp32
        assert c.fp32_fmul == 0

    def test_ff_fewer_macs_than_bp_per_row(self):
        gen = np.random.default_rng(0)
        for _ in range(50):
            widths = list(gen.integers(1, 10, size=gen.integers(2, 5)))
            b = int(gen.integers(1, 8))
            ff = analytic_counts(ArchSpec(widths, b, "ff_int8"))
            bp = analytic_counts(ArchSpec(widths, b, "bp_fp32"))
            # FF pushes 2b rows per step, BP pushes b; the FF terms are a
            # subset of BP's, strict once an activation-gradient GEMM exists
            ff_row = mac_count(ff, "ff_int8") / (2 * b)
            bp_row = mac_count(bp, "bp_fp32") / b
            if len(widths) > 2:
                assert ff_row < bp_row
            else:
                assert ff_row == bp_row

    def test_invalid_specs(self):
        with pytest.raises(ConfigError):
            analytic_counts(ArchSpec([5], 1, "ff_int8"))
        with pytest.raises(ConfigError):
            analytic_counts(ArchSpec([5, 3], 0, "ff_int8"))
        with pytest.raises(ConfigError):
            analytic_counts(ArchSpec([5, 3], 1, "int4"))


class TestInstrumentedParity:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4, 5, 6, 7])
    def test_ff_lookahead_detached_matches_exactly(self, seed):
        gen = np.random.default_rng(seed)
        widths = [int(gen.integers(2, 9))] + list(gen.integers(1, 9, size=gen.integers(1, 4)))
        batch = int(gen.integers(1, 7))
        slots = 2
        ds = tiny_dataset(widths[0], batch, slots, seed)
        cfg = TrainConfig(
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
        train_ff_lookahead(model, ds, cfg, counters)
        expected = analytic_counts(ArchSpec(widths, batch, "ff_int8"))
        assert counters == expected

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    @pytest.mark.parametrize("mode", ["fp32", "int8_naive"])
    def test_bp_matches_exactly(self, seed, mode):
        gen = np.random.default_rng(100 + seed)
        widths = [int(gen.integers(2, 9))] + list(gen.integers(1, 9, size=gen.integers(1, 4)))
        batch = int(gen.integers(1, 7))
        ds = tiny_dataset(widths[0], batch, 2, seed)
        # class count = last width for the head
        cfg = TrainConfig(
            epochs=1, batch_size=batch, learning_rate=0.01, seed=seed, eval_train_size=0
        )
        ds.train.labels[:] = ds.train.labels % widths[-1]
        ds.test.labels[:] = ds.test.labels % widths[-1]
        model = init_bp_model(widths, seed=seed)
        counters = OpCounters()
        train_bp(model, ds, cfg, mode, counters)
        arch_mode = "bp_fp32" if mode == "fp32" else "bp_int8"
        expected = analytic_counts(ArchSpec(widths, batch, arch_mode))
        assert counters == expected

    def test_merged_shards_equal_single_run(self):
        ds = tiny_dataset(5, 4, 2, 9)
        cfg = TrainConfig(
            epochs=1, batch_size=2, learning_rate=0.01, precision="int8",
            lookahead_mode="detached", seed=9, eval_train_size=0,
        )
        model = init_model([5, 3], seed=9, label_slots=2)
        total = OpCounters()
        train_ff_lookahead(model, ds, cfg, total)
        # two one-batch steps -> analytic is mergeable
        half = analytic_counts(ArchSpec([5, 3], 2, "ff_int8"))
        merged = half.snapshot()
        merged.merge(half)
        assert merged == total


class TestCostReport:
    def test_equal_counters_give_unit_ratio(self):
        c = OpCounters(int8_mul=100, int8_add=100)
        b = OpCounters(fp32_fmul=100, fp32_fadd=100)
        rep = cost_report({"ff_int8": c, "bp_fp32": b})
        assert ("ff_int8_mac_over_bp_fp32_mac", repr(1.0)) in rep.ratios

    def test_zero_bp_macs_undefined_sentinel(self):
        rep = cost_report({"ff_int8": OpCounters(int8_mul=5), "bp_fp32": OpCounters()})
        assert ("ff_int8_mac_over_bp_fp32_mac", "undefined") in rep.ratios

    def test_csv_sections(self):
        c = analytic_counts(ArchSpec([4, 3], 2, "ff_int8"))
        b = analytic_counts(ArchSpec([4, 3], 2, "bp_fp32"))
        rep = cost_report({"ff_int8": c, "bp_fp32": b}, rows_processed={"ff_int8": 4, "bp_fp32": 2})
        text = rep.to_csv_text()
        lines = text.splitlines()
        assert lines[0] == "mode,op_class,count"
        assert "ratios" in lines
        assert any(l.startswith("ff_int8,int8_mul,") for l in lines)
        assert any("ff_int8_mac_per_row_over_bp_fp32" in l for l in lines)
        assert "2.6" in rep.to_text()  # reference annotation present
