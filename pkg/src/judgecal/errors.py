"""Exception types shared across the library.

The command line maps these onto exit codes: problems with user-supplied
values or file contents exit 1, problems with data availability or
consistency exit 2, anything unexpected exits 3.
"""


class JudgecalError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(JudgecalError):
    """A file could not be parsed under its declared format."""


class ValidationError(JudgecalError):
    """A value violates a documented constraint (non-finite, out of range)."""


class DimensionError(ValidationError):
    """Rows or arrays disagree in length or shape."""


class ArityError(ValidationError):
    """A collection has too few entries to be meaningful."""


class DomainError(JudgecalError):
    """An operation was called outside its mathematical domain."""


class ArgumentError(JudgecalError):
    """Arguments are individually valid but jointly unusable."""


class IntegrityError(JudgecalError):
    """Loaded data contradicts itself (duplicates, missing coverage)."""


class CapacityError(JudgecalError):
    """Not enough data to satisfy a request."""
