"""Exception types shared across the package.

The CLI maps these onto process exit codes (validation 2, I/O 3, invariant 4).
"""


class OpenVoxError(Exception):
    pass


class ValidationError(OpenVoxError, ValueError):
    """Inputs violate a documented precondition."""


class FormatError(ValidationError):
    """A file does not carry the expected header or layout."""


class CorruptionError(ValidationError):
    """A file header parses but its payload is inconsistent with it."""


class DimensionError(ValidationError):
    """Arrays in one record disagree about their shapes."""


class InvariantError(OpenVoxError, RuntimeError):
    """An internal invariant was violated; indicates a bug, not bad input."""
