"""Exception hierarchy shared across the package."""


class FsedError(Exception):
    """Base class for all package errors."""


class FormatError(FsedError):
    """Malformed or unsupported file contents (WAV header, CSV layout)."""


class ValidationError(FsedError):
    """Input data violates a documented precondition."""


class ConfigError(FsedError):
    """Invalid configuration value or combination."""


class TaskError(FsedError):
    """A few-shot task cannot be constructed (e.g. fewer than 5 POS events)."""


class GenerationError(FsedError):
    """Synthetic data generation is infeasible for the requested spec."""


class ShapeError(FsedError):
    """Tensor shape mismatch."""


class NumericError(FsedError):
    """NaN/Inf encountered in a numeric computation."""


class SelectionError(FsedError):
    """No valid window/checkpoint satisfies the selection rule."""
