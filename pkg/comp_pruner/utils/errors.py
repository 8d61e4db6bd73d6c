from typing import Any, Optional


class CompError(Exception):
    """Base error; ``exit_code`` is what the CLI returns when it escapes a command."""

    exit_code = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context = context
        self.partial_report: Optional[Any] = None


class InputOutputError(CompError):
    exit_code = 2


class TrainingDivergedError(CompError):
    exit_code = 3


class CheckpointError(CompError):
    exit_code = 4


class ModelError(CompError):
    exit_code = 4


class DimensionMismatchError(ModelError, ValueError):
    pass


class NonFiniteError(ModelError, ValueError):
    pass


class InfeasibleConfigError(CompError):
    exit_code = 5


class SolverError(CompError):
    exit_code = 6


class NotSymmetricError(SolverError):
    pass


class NotPositiveDefiniteError(SolverError):
    def __init__(self, message: str, pivot_index: int, pivot: float, **context: Any):
        super().__init__(message, pivot_index=pivot_index, pivot=pivot, **context)
        self.pivot_index = pivot_index
        self.pivot = pivot


class SingularMatrixError(SolverError):
    def __init__(self, message: str, index: int, **context: Any):
        super().__init__(message, index=index, **context)
        self.index = index


class ConvergenceError(SolverError):
    def __init__(self, message: str, iterations: int, residual: float, estimate: Any = None, **context: Any):
        super().__init__(message, iterations=iterations, residual=residual, **context)
        self.iterations = iterations
        self.residual = residual
        self.estimate = estimate
