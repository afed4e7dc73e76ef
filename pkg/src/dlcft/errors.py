"""Exception hierarchy shared by every dlcft module."""


class DLCFTError(Exception):
    """Base class for library errors."""


class DimensionError(DLCFTError, ValueError):
    """Operand shapes do not compose."""


class ValidationError(DLCFTError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(DLCFTError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class UsageError(DLCFTError, RuntimeError):
    """Call sequence is invalid (stale cache, duplicate head, missing store...)."""


class CapacityError(DLCFTError):
    """A dense object would exceed the configured size cap."""


class ContractError(DLCFTError):
    """An operation was requested in a configuration that cannot support it."""


class DegenerateCurvatureError(DLCFTError):
    """A curvature block has a zero factor trace and cannot be rescaled."""
