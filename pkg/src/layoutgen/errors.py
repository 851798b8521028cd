"""Error and warning types shared across the package.

Every raised error carries a stable ``code`` string so callers (and the CLI
exit-code mapping) can dispatch without parsing messages.
"""

from __future__ import annotations


class LayoutGenError(Exception):
    """Base class; ``code`` is a stable machine-readable identifier."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class DataError(LayoutGenError):
    """Invalid inputs, files, or contract violations on data objects."""


class NumericError(LayoutGenError):
    """Numerically infeasible or degenerate computations."""


class QuantizerWarning(UserWarning):
    """Recoverable quantizer-fitting issues (e.g. too few distinct values)."""


class PriorWindowWarning(UserWarning):
    """A weak-constraint window had to be widened to contain a centroid."""
