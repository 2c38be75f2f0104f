"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates a precondition."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class OracleError(ArithmeticError):
    """A finite-difference oracle evaluated to a non-finite value."""
