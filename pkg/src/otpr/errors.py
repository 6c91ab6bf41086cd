"""Shared exception types; the CLI maps these onto exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or precondition (exit code 2)."""


class ShapeError(ValueError):
    """Dimension mismatch between arrays."""


class NumericalError(FloatingPointError):
    """Non-finite values encountered during training or sampling (exit code 3)."""


class SamplingError(NumericalError):
    """Reverse-SDE integration produced non-finite intermediates."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class GenerationError(RuntimeError):
    """Demo generation failed (expert success rate too low)."""


class FileFormatError(IOError):
    """Corrupt or unrecognized artifact file (exit code 4)."""
