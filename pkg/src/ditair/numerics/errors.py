class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigError(ValueError):
    """Invalid configuration or invocation."""


class AuditError(AssertionError):
    """Instantiated parameter counts disagree with the closed forms."""
