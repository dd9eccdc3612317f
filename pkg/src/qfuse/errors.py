"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not conform."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NonFiniteError(FloatingPointError):
    """A forward computation produced NaN or Inf."""
