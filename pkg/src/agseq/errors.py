"""Error taxonomy shared across the package.

Each class maps to one CLI exit code, so raising the right type deep in the
library is what keeps the command-line contract stable.
"""


class AgseqError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AgseqError):
    """Caller supplied inconsistent shapes, sizes, or settings."""


class InvalidInputError(AgseqError):
    """Runtime input violates an operation's precondition."""


class DataError(AgseqError):
    """A data file or token stream is malformed."""


class NumericError(AgseqError):
    """A non-finite value surfaced where finite math was required."""


class CompatibilityError(AgseqError):
    """Checkpoint and dataset disagree (e.g. vocabulary sizes)."""
