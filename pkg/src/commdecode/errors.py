"""Exception hierarchy shared across the toolkit."""


class CommDecodeError(Exception):
    """Base class for all toolkit errors."""


class DomainError(CommDecodeError, ValueError):
    """An argument lies outside the domain of the operation."""


class UsageError(CommDecodeError, RuntimeError):
    """An operation was called in a state where it is not defined."""


class SizeError(CommDecodeError):
    """An exhaustive enumeration would exceed its configured cap."""

    def __init__(self, message, cardinality=None):
        super().__init__(message)
        self.cardinality = cardinality


class NumericError(CommDecodeError, FloatingPointError):
    """A NaN or infinite value was produced."""


class TrainingFailure(CommDecodeError):
    """Training finished without reaching its required criterion."""

    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = list(offending or [])
