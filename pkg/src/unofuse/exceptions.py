"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition or invariant."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values (e.g. diverging training)."""
