"""Exception types shared across the library."""


class HraLabError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HraLabError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(HraLabError, ValueError):
    """Invalid configuration value or combination."""


class RoutingError(HraLabError, LookupError):
    """A task id does not resolve to a registered adapter head."""


class ContractError(HraLabError, ValueError):
    """A call violated an operation's precondition."""


class NumericError(HraLabError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class EmptyInputError(HraLabError, ValueError):
    """An operation received an empty sequence where frames are required."""
