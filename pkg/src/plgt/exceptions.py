"""Exception hierarchy shared by every module of the package."""


class PlgtError(Exception):
    """Base class for all package errors."""


class ShapeError(PlgtError, ValueError):
    """Operand extents are incompatible."""


class DomainError(PlgtError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(PlgtError, ValueError):
    """A call violated a documented precondition."""


class ConfigError(PlgtError, ValueError):
    """Invalid hyperparameter or command configuration."""


class DataError(PlgtError, ValueError):
    """Malformed, empty or out-of-range input data."""


class TrainingError(PlgtError, RuntimeError):
    """Numerical failure during optimisation (non-finite loss or gradient)."""


class CheckpointError(PlgtError, IOError):
    """A checkpoint file is truncated, corrupt or incompatible."""
