"""Least-squares mask tuning.

Pruning input neuron j of a dense zeroes column j of W. The tuned mask
rescales the retained columns so the dense output on calibration tokens stays
as close as possible to the unpruned output:

    min over m_hat   sum_t ||W Diag(m * X_t) m_hat - W X_t||^2 + eps ||m_hat||^2

The bias appears on both sides and cancels.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import math
import numpy as np
from numpy.typing import ArrayLike

from ..config import SolverKind
from ..utils import get_logger, DimensionMismatchError, ModelError, SolverError
from .linalg import Matrix, Vector, as_matrix, as_vector, sample_variance
from .metrics import metrics
from .solvers import MaskSolver, RestrictedSystem, SolverFactory

logger = get_logger(__name__)


def hadamard_gram(weight: Matrix, inputs: Matrix) -> Matrix:
    """(W^T W) * (X X^T), the coefficient matrix of the unrestricted normal equations."""
    return (weight.T @ weight) * (inputs @ inputs.T)


@dataclass(frozen=True)
class TuneProblem:
    weight: Matrix
    inputs: Matrix
    binary_mask: Vector
    epsilon: float
    solver: SolverKind = SolverKind.DIRECT
    layer: int = -1
    dense: str = ""
    gram: Optional[Matrix] = field(default=None, repr=False, compare=False)

    @classmethod
    def create(cls, weight: ArrayLike, inputs: ArrayLike, binary_mask: Optional[ArrayLike] = None,
               epsilon: float = 1e-10, **kwargs) -> "TuneProblem":
        weight = as_matrix(weight, "weight")
        inputs = as_matrix(inputs, "inputs")
        if inputs.shape[0] != weight.shape[1]:
            raise DimensionMismatchError(
                f"inputs have {inputs.shape[0]} features, dense has {weight.shape[1]} inputs",
            )
        mask = np.ones(weight.shape[1]) if binary_mask is None else as_vector(binary_mask, "binary_mask")
        if mask.shape[0] != weight.shape[1] or not np.all((mask == 0.0) | (mask == 1.0)):
            raise DimensionMismatchError("binary mask must be a 0/1 vector over the dense inputs")
        if not epsilon > 0.0:
            raise DimensionMismatchError("epsilon must be positive", epsilon=epsilon)
        return cls(weight=weight, inputs=inputs, binary_mask=mask, epsilon=float(epsilon), **kwargs)

    def with_mask(self, binary_mask: ArrayLike) -> "TuneProblem":
        """Same dense and inputs under another mask; the Gram matrix is shared."""
        mask = as_vector(binary_mask, "binary_mask")
        if mask.shape != self.binary_mask.shape:
            raise DimensionMismatchError("mask length changed")
        return replace(self, binary_mask=mask, gram=self.hadamard_gram())

    def hadamard_gram(self) -> Matrix:
        if self.gram is not None:
            return self.gram
        return hadamard_gram(self.weight, self.inputs)

    @property
    def retained(self) -> np.ndarray:
        return np.flatnonzero(self.binary_mask == 1.0)

    @property
    def output_entries(self) -> int:
        return self.weight.shape[0] * self.inputs.shape[1]


@dataclass(frozen=True)
class TuneResult:
    tuned_mask: Vector
    binary_mask: Vector
    residual: float           # RMS over all p x T output entries
    variance: float           # population variance of the retained entries
    solver_iterations: int = 0
    solver: str = "none"
    solver_fallback: bool = False


def _squared_residual(gram: Matrix, tuned: Vector) -> float:
    d = tuned - 1.0
    return max(float(d @ gram @ d), 0.0)


def tune_mask(problem: TuneProblem, solver: Optional[MaskSolver] = None) -> TuneResult:
    q = problem.binary_mask.shape[0]
    retained = problem.retained
    if retained.size == 0:
        raise ModelError(
            "cannot tune a dense with no retained neurons",
            layer=problem.layer,
            dense=problem.dense,
        )
    if retained.size == q:
        # the untouched dense reconstructs itself exactly
        return TuneResult(
            tuned_mask=np.ones(q),
            binary_mask=problem.binary_mask.copy(),
            residual=0.0,
            variance=0.0,
        )

    gram = problem.hadamard_gram()
    system = RestrictedSystem(
        weight=problem.weight,
        inputs=problem.inputs,
        retained=retained,
        gram=gram,
        epsilon=problem.epsilon,
    )
    solver = solver or SolverFactory.create_solver(problem.solver)
    try:
        outcome = solver.solve(system)
    except SolverError as e:
        e.context.update(layer=problem.layer, dense=problem.dense, pruned=int(q - retained.size))
        logger.error(
            "Mask tuning failed",
            layer=problem.layer,
            dense=problem.dense,
            pruned=int(q - retained.size),
            exc_info=True,
        )
        raise

    tuned = np.zeros(q)
    tuned[retained] = outcome.values
    metrics.record_mask_tune(outcome.solver)
    return TuneResult(
        tuned_mask=tuned,
        binary_mask=problem.binary_mask.copy(),
        residual=math.sqrt(_squared_residual(gram, tuned) / problem.output_entries),
        variance=sample_variance(outcome.values),
        solver_iterations=outcome.iterations,
        solver=outcome.solver,
        solver_fallback=outcome.fallback,
    )


def mask_variance(result: TuneResult) -> float:
    retained = result.tuned_mask[result.binary_mask == 1.0]
    if retained.size == 0:
        raise ModelError("mask has no retained entries")
    return sample_variance(retained)


def reconstruction_error(weight: ArrayLike, inputs: ArrayLike, tuned_mask: ArrayLike,
                         binary_mask: Optional[ArrayLike] = None) -> float:
    """RMS of W Diag(m_hat) (m * X) - W X over all output entries, computed explicitly."""
    weight = as_matrix(weight, "weight")
    inputs = as_matrix(inputs, "inputs")
    tuned = as_vector(tuned_mask, "tuned_mask")
    binary = np.ones_like(tuned) if binary_mask is None else as_vector(binary_mask, "binary_mask")
    if weight.shape[1] != inputs.shape[0] or tuned.shape[0] != weight.shape[1] or binary.shape != tuned.shape:
        raise DimensionMismatchError("weight, inputs and masks do not agree on the input dimension")
    diff = weight @ (((tuned * binary)[:, None] * inputs)) - weight @ inputs
    return float(np.sqrt(np.mean(diff * diff)))


def tuning_objective(problem: TuneProblem, tuned_mask: ArrayLike) -> float:
    """Regularized objective of a candidate mask (pruned entries are forced to zero)."""
    tuned = as_vector(tuned_mask, "tuned_mask") * problem.binary_mask
    diff = problem.weight @ (tuned[:, None] * problem.inputs) - problem.weight @ problem.inputs
    return float(np.sum(diff * diff) + problem.epsilon * (tuned @ tuned))
