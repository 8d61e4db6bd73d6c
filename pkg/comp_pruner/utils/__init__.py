from .logger import setup_logging, get_logger
from .errors import (
    CompError,
    InputOutputError,
    TrainingDivergedError,
    CheckpointError,
    ModelError,
    DimensionMismatchError,
    NonFiniteError,
    InfeasibleConfigError,
    SolverError,
    NotSymmetricError,
    NotPositiveDefiniteError,
    SingularMatrixError,
    ConvergenceError,
)

__all__ = [
    "setup_logging",
    "get_logger",
    "CompError",
    "InputOutputError",
    "TrainingDivergedError",
    "CheckpointError",
    "ModelError",
    "DimensionMismatchError",
    "NonFiniteError",
    "InfeasibleConfigError",
    "SolverError",
    "NotSymmetricError",
    "NotPositiveDefiniteError",
    "SingularMatrixError",
    "ConvergenceError",
]
