from .metrics import metrics, MetricsCollector
from .linalg import (
    Eigenpair,
    Which,
    as_matrix,
    as_vector,
    matmul,
    cholesky_factor,
    cholesky_solve,
    extreme_eigpair,
    lsq_solve_iterative,
    sample_variance,
)
from .solvers import (
    MaskSolver,
    DirectSolver,
    IterativeSolver,
    FallbackSolver,
    SolverFactory,
    RestrictedSystem,
    SolveOutcome,
)
from .importance import (
    NormalMatrixContext,
    NeuronScores,
    layer_importance,
    layer_scores,
    resolve_epsilon,
    normal_context,
    build_normal_context,
    condition_number,
    condition_gradient,
    closed_form_gradient,
    finite_difference_gradient,
    neuron_importance,
    rank_neurons,
    score_dense,
)
from .masktune import (
    TuneProblem,
    TuneResult,
    hadamard_gram,
    tune_mask,
    mask_variance,
    reconstruction_error,
    tuning_objective,
)

__all__ = [
    "metrics",
    "MetricsCollector",
    "Eigenpair",
    "Which",
    "as_matrix",
    "as_vector",
    "matmul",
    "cholesky_factor",
    "cholesky_solve",
    "extreme_eigpair",
    "lsq_solve_iterative",
    "sample_variance",
    "MaskSolver",
    "DirectSolver",
    "IterativeSolver",
    "FallbackSolver",
    "SolverFactory",
    "RestrictedSystem",
    "SolveOutcome",
    "NormalMatrixContext",
    "NeuronScores",
    "layer_importance",
    "layer_scores",
    "resolve_epsilon",
    "normal_context",
    "build_normal_context",
    "condition_number",
    "condition_gradient",
    "closed_form_gradient",
    "finite_difference_gradient",
    "neuron_importance",
    "rank_neurons",
    "score_dense",
    "TuneProblem",
    "TuneResult",
    "hadamard_gram",
    "tune_mask",
    "mask_variance",
    "reconstruction_error",
    "tuning_objective",
]
