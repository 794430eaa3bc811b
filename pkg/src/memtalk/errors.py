"""Exception taxonomy shared by all modules.

Every error raised by the package maps to one of these categories so the
CLI can emit a single machine-parseable line per failure.
"""


class MemtalkError(Exception):
    """Base class; carries a short machine-readable category string."""

    category = "error"


class ArgumentError(MemtalkError, ValueError):
    """Invalid argument: bad shape, bad count, inconsistent dimensions."""

    category = "argument-error"


class DomainError(MemtalkError, ValueError):
    """Input outside the mathematical domain of an operation."""

    category = "domain-error"


class NumericError(MemtalkError, ArithmeticError):
    """Non-finite values or degenerate numerical input."""

    category = "numeric-error"


class IntegrityError(MemtalkError, RuntimeError):
    """Persisted data fails a length or hash check."""

    category = "integrity-error"


class ConfigError(MemtalkError, ValueError):
    """Config file missing, unreadable, or containing unknown fields."""

    category = "config-error"
