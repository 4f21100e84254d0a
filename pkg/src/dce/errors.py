"""Exception types shared across the package."""


class DceError(Exception):
    """Base class for package errors."""


class ConfigError(DceError, ValueError):
    pass


class DimensionError(DceError, ValueError):
    pass


class VocabError(DceError, IndexError):
    pass


class EmptyInputError(DceError, ValueError):
    pass


class SessionLengthError(DceError, ValueError):
    pass


class AlignmentError(DceError, ValueError):
    pass


class InsufficientHistoryError(DceError, ValueError):
    pass


class DegenerateClassError(DceError, ValueError):
    """Raised when a metric needs both classes but only one is present."""


class NumericError(DceError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""
