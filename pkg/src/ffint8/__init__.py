"""INT8 forward-forward training engine with look-ahead losses,
a backpropagation reference trainer, and operation-count accounting."""

__version__ = "0.1.0"

from .counters import OpCounters
from .qtensor import (
    QuantRng,
    QuantizedTensor,
    compute_scale,
    dequantize,
    int8_matmul,
    quantize_nearest,
    quantize_stochastic,
)

__all__ = [
    "OpCounters",
    "QuantRng",
    "QuantizedTensor",
    "compute_scale",
    "dequantize",
    "int8_matmul",
    "quantize_nearest",
    "quantize_stochastic",
    "__version__",
]
