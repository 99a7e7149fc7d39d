"""Shared error taxonomy.

Exit-code mapping used by the CLI: ConfigError/usage -> 1, DataError and
FormatError -> 2, NumericError -> 3.
"""


class ShapeError(ValueError):
    """Operand dimensions or extents are incompatible with an op's contract."""


class ConfigError(ValueError):
    """Bad configuration key, value, or combination."""


class DataError(ValueError):
    """Dataset content violates a precondition (sizes, labels, emptiness)."""


class FormatError(ValueError):
    """On-disk artifact is malformed (bad magic, truncation, parse failure)."""


class NumericError(RuntimeError):
    """Non-finite values or a failed numerical verification."""
