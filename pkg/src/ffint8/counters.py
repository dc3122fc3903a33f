"""Operation counters for the integer and floating-point kernel paths.

Counting discipline (shared by every kernel and the analytic cost model):

* GEMMs count one MUL and one ADD per multiply-accumulate, in the
  precision class of the kernel (``int8_mul``/``int8_add`` for the
  integer kernel, ``fp32_fmul``/``fp32_fadd`` for the real kernel).
* Quantizing a tensor counts one 32-bit CMP (the clamp) and two
  FADD-class ops (scale divide plus rounding offset) per element.
* Everything else (bias add, ReLU, normalization, dequantize, optimizer
  updates, loss scalars) is bookkeeping and is not counted.

The discipline is what makes instrumented runs comparable with
``costmeter.analytic_counts``: both sides count exactly the same events.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class OpCounters:
    """Monotone tallies of counted operations, mergeable by addition."""

    int8_mul: int = 0
    int8_add: int = 0
    fp32_fadd: int = 0
    fp32_fmul: int = 0
    cmp32: int = 0

    def add_int8_mac(self, count: int) -> None:
        self.int8_mul += count
        self.int8_add += count

    def add_fp32_mac(self, count: int) -> None:
        self.fp32_fmul += count
        self.fp32_fadd += count

    def add_quantize(self, numel: int) -> None:
        """One clamp CMP and two FADD-class ops per quantized element."""
        self.cmp32 += numel
        self.fp32_fadd += 2 * numel

    def merge(self, other: "OpCounters") -> None:
        """Fold another counter set into this one (for sharded runs)."""
        self.int8_mul += other.int8_mul
        self.int8_add += other.int8_add
        self.fp32_fadd += other.fp32_fadd
        self.fp32_fmul += other.fp32_fmul
        self.cmp32 += other.cmp32

    def snapshot(self) -> "OpCounters":
        return OpCounters(
            self.int8_mul, self.int8_add, self.fp32_fadd, self.fp32_fmul, self.cmp32
        )

    def delta_since(self, earlier: "OpCounters") -> "OpCounters":
        return OpCounters(
            self.int8_mul - earlier.int8_mul,
            self.int8_add - earlier.int8_add,
            self.fp32_fadd - earlier.fp32_fadd,
            self.fp32_fmul - earlier.fp32_fmul,
            self.cmp32 - earlier.cmp32,
        )

    def as_dict(self) -> dict[str, int]:
        return {
            "int8_mul": self.int8_mul,
            "int8_add": self.int8_add,
            "fp32_fadd": self.fp32_fadd,
            "fp32_fmul": self.fp32_fmul,
            "cmp32": self.cmp32,
        }
