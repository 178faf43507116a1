"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Matrix shapes are mutually inconsistent."""


class DomainError(ValueError):
    """An argument lies outside the domain where the operation is defined."""


class ConvergenceError(RuntimeError):
    """An iterative method hit its iteration cap before converging."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
