"""Exception types shared across the package."""


class PositivityError(RuntimeError):
    """A matrix or field that must be positive definite is not."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class TwistError(ValueError):
    """Inconsistent lattice twist data."""
