"""
Exception types shared by the transport, training and inference modules.
"""

from typing import Optional


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


class ClosureError(ValueError):
    """Adding a multi-index would break downward closure."""


class NumericalError(ArithmeticError):
    """Non-finite value or failed numerical procedure.

    sample_index points at the first offending sample when the failure
    comes from a per-sample quantity.
    """

    def __init__(self, message: str, sample_index: Optional[int] = None):
        if sample_index is not None:
            message = f"{message} (sample {sample_index})"
        super().__init__(message)
        self.sample_index = sample_index


class InversionError(NumericalError):
    """Root finding of a monotone component failed."""


class DegenerateSamplesError(NumericalError):
    """Training samples cannot be standardized (zero variance column)."""
