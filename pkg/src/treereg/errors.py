"""Exception types raised across the package."""


class TreeRegError(Exception):
    """Base class for all package errors."""


class InvalidArchitectureError(TreeRegError, ValueError):
    pass


class ShapeError(TreeRegError, ValueError):
    pass


class InvalidInputError(TreeRegError, ValueError):
    pass


class ContractError(TreeRegError, RuntimeError):
    pass


class UncoveredInputError(TreeRegError, ValueError):
    """An input point falls outside every region box."""


class IngestionError(TreeRegError, ValueError):
    """A delimited file could not be turned into a dataset."""


class NonFiniteLossError(TreeRegError, FloatingPointError):
    pass
