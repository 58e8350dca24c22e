"""Exception types shared across the toolkit."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericError(FloatingPointError):
    """Raised when NaN/Inf values show up where finite values are required."""


class ConfigError(ValueError):
    """Raised for malformed run configurations (CLI exit code 2)."""
