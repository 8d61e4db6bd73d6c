from pydantic import BaseModel, Field
from typing import Any, Dict, List, Optional

from ..config import InputPolicy
from .pruning import LayerRemoval, LayerScore, RatioPlan

SCHEMA_VERSION = 1


class EvalMetrics(BaseModel):
    perplexity: float
    kl: Optional[float] = None  # KL(original || this model), mean over positions
    logit_mse: Optional[float] = None


class DenseReport(BaseModel):
    layer: int
    dense: str
    in_features: int
    out_features: int
    pruned: int
    pruned_params: int
    cap_hit: bool = False
    variance_threshold: float = 0.0
    variance: float = 0.0
    reconstruction_rms: float = 0.0
    kappa: Optional[float] = None
    gradient_fallback: bool = False
    solver_fallback: bool = False
    solver_iterations: int = 0


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any]
    input_digests: Dict[str, str] = {}
    tool_version: str
    seed: int


class PruneReport(BaseModel):
    schema_version: int = SCHEMA_VERSION
    strategy: str
    status: str = "ok"  # ok | partial
    error: Optional[str] = None
    config: Dict[str, Any] = {}
    input_policy: Optional[InputPolicy] = None
    target_ratio: float
    total_params: int
    removed_layers: List[int] = []
    layer_history: List[LayerRemoval] = []
    final_layer_scores: List[LayerScore] = []
    plan: Optional[RatioPlan] = None
    denses: List[DenseReport] = []
    removed_params: int = 0
    neuron_pruned_params: int = 0
    achieved_ratio: float = 0.0
    shortfall: bool = False
    shortfall_params: float = 0.0
    notes: List[str] = []
    before: Optional[EvalMetrics] = None
    after: Optional[EvalMetrics] = None
    calibration_kl_tuned: Optional[float] = None
    calibration_kl_untuned: Optional[float] = None
    captures: List[str] = []
    manifest: Optional[RunManifest] = None
    # wall clock; written to the timings sidecar, never into the report body
    phase_seconds: Dict[str, float] = Field(default_factory=dict, exclude=True)


class AblationResult(BaseModel):
    schema_version: int = SCHEMA_VERSION
    kind: str
    reports: Dict[str, PruneReport]
    identical_orders: Optional[bool] = None
    manifest: Optional[RunManifest] = None
