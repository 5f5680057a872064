"""Exception types shared across the package."""


class MucaError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(MucaError, ValueError):
    """A tensor has the wrong extent along some axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class NumericDomainError(MucaError, ArithmeticError):
    """A NaN or infinity reached an operation or a loss."""


class ContractError(MucaError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ConfigurationError(MucaError, ValueError):
    """Invalid model, schedule, or run configuration."""


class DataError(MucaError, OSError):
    """Missing or malformed dataset / checkpoint files."""
