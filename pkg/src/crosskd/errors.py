"""Exception hierarchy shared across the package."""


class CrossKDError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(CrossKDError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(CrossKDError, ValueError):
    """A precondition of an operation was violated by its caller."""


class ConfigError(CrossKDError, ValueError):
    """A configuration value is invalid or inconsistent."""


class AlignmentError(ConfigError):
    """Teacher token grid and student feature grid disagree."""


class DataError(CrossKDError, ValueError):
    """Input data is malformed or outside its admissible range."""


class NumericalError(CrossKDError, ArithmeticError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message: str, component: str | None = None):
        super().__init__(message)
        self.component = component
