"""Exception hierarchy shared across the package."""


class PyramidHashError(Exception):
    pass


class DimensionError(PyramidHashError, ValueError):
    """Raised when tensor shapes do not conform for an operation."""


class ContractError(PyramidHashError, ValueError):
    """Raised when an argument violates a documented precondition."""


class ConfigError(PyramidHashError, ValueError):
    pass


class FormatError(PyramidHashError, ValueError):
    """Raised for malformed or truncated checkpoint/code/manifest files."""


class NumericError(PyramidHashError, ArithmeticError):
    """Raised when a forward pass or training step produces NaN/Inf."""
