"""Exception types shared across the package."""


class FFInt8Error(Exception):
    """Base class for all package errors."""


class InvalidTensor(FFInt8Error):
    """Tensor contains NaN/Inf or violates a shape/range invariant."""


class InvalidScale(FFInt8Error):
    """Quantization scale is not strictly positive."""


class ShapeError(FFInt8Error):
    """Operand shapes are incompatible."""


class OverflowRisk(FFInt8Error):
    """Inner dimension too large to guarantee exact 32-bit accumulation."""


class StaleForward(FFInt8Error):
    """Retained activations do not match the model's current weights."""


class BadMagic(FFInt8Error):
    """IDX file has an unexpected magic number."""


class CountMismatch(FFInt8Error):
    """Image and label files disagree on sample count."""


class TruncatedFile(FFInt8Error):
    """IDX file is shorter than its header promises."""


class NumericFailure(FFInt8Error):
    """NaN or Inf appeared in a training loss."""


class ConfigError(FFInt8Error):
    """Run configuration is malformed or contains unknown keys."""
