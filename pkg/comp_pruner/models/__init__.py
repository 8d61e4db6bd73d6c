from .workbench import ModelConfig, TrainConfig, TrainingPoint, TrainingHistory
from .pruning import (
    CalibrationSpec,
    PruneConfig,
    LayerScore,
    LayerRemoval,
    LayerAllocation,
    RatioPlan,
)
from .reports import SCHEMA_VERSION, EvalMetrics, DenseReport, RunManifest, PruneReport, AblationResult

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "TrainingPoint",
    "TrainingHistory",
    "CalibrationSpec",
    "PruneConfig",
    "LayerScore",
    "LayerRemoval",
    "LayerAllocation",
    "RatioPlan",
    "SCHEMA_VERSION",
    "EvalMetrics",
    "DenseReport",
    "RunManifest",
    "PruneReport",
    "AblationResult",
]
