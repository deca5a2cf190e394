"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when inputs violate a documented contract (shapes, ranges, ratios)."""


class GenerationError(RuntimeError):
    """Raised when synthetic data generation cannot satisfy its constraints."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""
