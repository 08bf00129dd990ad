"""
Errors Module
Exception types raised across the tensor completion engine.
"""

from typing import Optional


class JuliaError(Exception):
    """Base class for every error raised by the engine."""
    pass


class ConfigError(JuliaError):
    """Exception raised for invalid training or run configuration values."""
    pass


class TensorDataError(JuliaError):
    """Exception raised when tensor input cannot be parsed or validated."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class DuplicateIndexError(TensorDataError):
    """Exception raised when two entries share the same index tuple."""
    pass


class ShapeMismatchError(JuliaError):
    """Exception raised for out-of-bounds indices or inconsistent dimensions."""
    pass


class CheckpointError(JuliaError):
    """Exception raised when a checkpoint file is corrupt or inconsistent."""
    pass


class CheckpointVersionError(CheckpointError):
    """Exception raised when a checkpoint declares an unknown format version."""

    def __init__(self, version):
        self.version = version
        super().__init__(f"Unsupported checkpoint format version: {version!r}")


class DivergenceError(JuliaError):
    """Exception raised when a loss or gradient becomes non-finite."""

    def __init__(self, block: str, detail: str = "non-finite values"):
        self.block = block
        super().__init__(f"Divergence in {block} block: {detail}")


class EvaluationError(JuliaError):
    """Exception raised for degenerate metric inputs."""
    pass
