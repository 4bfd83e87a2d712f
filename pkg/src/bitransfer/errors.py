"""Exception types shared across the package."""


class BitransferError(Exception):
    """Base class for all package errors."""


class DimensionError(BitransferError, ValueError):
    pass


class DomainError(BitransferError, ValueError):
    pass


class ConfigError(BitransferError, ValueError):
    pass


class DataError(BitransferError, ValueError):
    pass


class DegenerateInputError(BitransferError, ValueError):
    pass


class ContractError(BitransferError, RuntimeError):
    pass


class NumericError(BitransferError, ArithmeticError):
    """Raised when a forward result is NaN/Inf or a factorization breaks down."""


class TrainingError(BitransferError, RuntimeError):
    pass
