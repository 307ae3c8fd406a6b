"""Exception types shared across the package."""


class ForchupError(Exception):
    """Base class for all package errors."""


class DomainError(ForchupError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConvergenceError(ForchupError, RuntimeError):
    """An iterative procedure failed to converge.

    Carries whatever diagnostics the failing routine could collect.
    """

    def __init__(self, message, iterations=None, residual=None, **info):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.info = info


class MaxIterationsExceeded(ConvergenceError):
    """Picard iteration hit its cap before reaching the tolerance."""


class SolverError(ForchupError, RuntimeError):
    """The linear solver broke down or the system is singular."""


class StageError(ForchupError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
