"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: validation problems exit 2,
data problems exit 3, anything else escaping a command exits 4.
"""

from __future__ import annotations


class DubkitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(DubkitError):
    """Invalid argument, configuration value, or estimator state."""


class DataError(DubkitError):
    """Malformed or inconsistent input data (files, corpora, records)."""


class InconsistentStateError(DataError):
    """Visible tokens contradict the conditioning skeleton.

    ``position`` is the first sequence index at which no consistent
    completion exists.
    """

    def __init__(self, position: int, message: str | None = None):
        self.position = position
        super().__init__(message or f"no consistent completion: first contradiction at position {position}")


class DegenerateBinError(ValidationError):
    """A time bin holds too few samples to fit its local model.

    ``bin_index`` names the offending bin.
    """

    def __init__(self, bin_index: int, message: str | None = None):
        self.bin_index = bin_index
        super().__init__(message or f"time bin {bin_index} is degenerate: not enough samples to fit")
