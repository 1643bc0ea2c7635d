"""Exception hierarchy shared by all modules."""


class PRIQAError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PRIQAError, ValueError):
    """Invalid configuration or parameter/config mismatch."""


class FormatError(PRIQAError, ValueError):
    """On-disk data does not follow the expected layout or invariants."""


class EmptySupportError(PRIQAError, ValueError):
    """An operation needs at least one valid pixel (or pair) and found none."""


class NumericError(PRIQAError, ArithmeticError):
    """A non-finite value appeared during computation."""


class StateError(PRIQAError, RuntimeError):
    """An object lacks data required by the requested operation."""
