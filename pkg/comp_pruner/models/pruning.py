from pydantic import BaseModel, Field
from typing import Dict, List, Optional

from ..config import InputPolicy, LayerOrder, SolverKind


class CalibrationSpec(BaseModel):
    n_samples: int = Field(10, ge=1)
    seq_len: int = Field(128, ge=2)


class PruneConfig(BaseModel):
    """Inputs of the pruning pipeline; every default is resolved into the report."""
    ratio: float = Field(0.2, ge=0.0, lt=1.0)
    removed_layers: int = Field(0, ge=0)
    epsilon: Optional[float] = Field(None, gt=0)  # None: 1e-6 * trace(A^T A) / q, floor 1e-10
    var_step: float = Field(1e-3, gt=0)
    neuron_step: Optional[int] = Field(None, ge=1)  # None: max(1, q // 64)
    exempt_layers: Optional[List[int]] = None  # None: first two and last
    dense_cap: float = Field(0.95, gt=0.0, lt=1.0)
    solver: SolverKind = SolverKind.DIRECT
    seed: int = 0
    calibration: CalibrationSpec = CalibrationSpec()
    eval_samples: int = Field(16, ge=1)
    input_policy: InputPolicy = InputPolicy.IDENTICAL
    layer_order: LayerOrder = LayerOrder.ITERATIVE
    recompute_importance: bool = False


class LayerScore(BaseModel):
    layer: int
    redundancy: float  # mean cosine between layer input and output tokens
    importance: float  # 1 - redundancy
    skipped_tokens: int = 0


class LayerRemoval(BaseModel):
    iteration: int
    removed: int
    scores: List[LayerScore]


class LayerAllocation(BaseModel):
    layer: int
    importance: float
    weight: float
    ratio: float
    budget: float
    params: int
    capacity: int
    clipped: bool = False


class RatioPlan(BaseModel):
    total_budget: float
    allocations: List[LayerAllocation] = []

    def budget_for(self, layer: int) -> float:
        for allocation in self.allocations:
            if allocation.layer == layer:
                return allocation.budget
        return 0.0

    @property
    def weights(self) -> Dict[int, float]:
        return {a.layer: a.weight for a in self.allocations}
