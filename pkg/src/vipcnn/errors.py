"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Input violates a documented precondition (degenerate box, bad label, ...)."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN/inf loss."""
