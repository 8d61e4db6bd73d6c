from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator

from ..config import settings, SolverKind
from ..utils import get_logger, SolverError
from .linalg import Matrix, Vector, cholesky_factor, cholesky_solve, lsq_solve_iterative
from .metrics import metrics

logger = get_logger(__name__)


@dataclass(frozen=True)
class RestrictedSystem:
    """Mask tuning restricted to the retained inputs R of one dense.

    Direct form: (G_RR + eps I) x = (G 1)_R with G = (W^T W) * (X X^T).
    Stacked form: min ||W_R Diag(x) X_R - W X||^2 + eps ||x||^2 over all tokens.
    """

    weight: Matrix          # p x q
    inputs: Matrix          # q x T
    retained: np.ndarray    # indices R
    gram: Matrix            # q x q Hadamard Gram matrix G
    epsilon: float

    @property
    def size(self) -> int:
        return int(self.retained.size)

    def normal_matrix(self) -> Matrix:
        r = self.retained
        return self.gram[np.ix_(r, r)] + self.epsilon * np.eye(r.size)

    def normal_rhs(self) -> Vector:
        return self.gram.sum(axis=1)[self.retained]

    def stacked_operator(self) -> LinearOperator:
        w_r = self.weight[:, self.retained]
        x_r = self.inputs[self.retained, :]
        p, tokens = self.weight.shape[0], self.inputs.shape[1]

        def matvec(x):
            return (w_r @ (np.ravel(x)[:, None] * x_r)).ravel()

        def rmatvec(y):
            y = np.reshape(y, (p, tokens))
            return (x_r * (w_r.T @ y)).sum(axis=1)

        return LinearOperator((p * tokens, self.size), matvec=matvec, rmatvec=rmatvec, dtype=np.float64)

    def stacked_target(self) -> Vector:
        return (self.weight @ self.inputs).ravel()


@dataclass(frozen=True)
class SolveOutcome:
    values: Vector
    iterations: int
    solver: str
    fallback: bool = False


class MaskSolver(ABC):
    """Solver for the restricted tuning system"""

    name: str = ""

    @abstractmethod
    def solve(self, system: RestrictedSystem) -> SolveOutcome:
        pass


class DirectSolver(MaskSolver):
    """Cholesky on the regularized Hadamard normal equations"""

    name = SolverKind.DIRECT.value

    def solve(self, system: RestrictedSystem) -> SolveOutcome:
        lower = cholesky_factor(system.normal_matrix())
        values = cholesky_solve(lower, system.normal_rhs())
        return SolveOutcome(values=values, iterations=0, solver=self.name)


class IterativeSolver(MaskSolver):
    """Damped LSMR on the stacked token system, never materialized"""

    name = SolverKind.ITERATIVE.value

    def __init__(self, tol: Optional[float] = None, max_iter: Optional[int] = None):
        self.tol = tol or settings.lsq_tol
        self.max_iter = max_iter or settings.lsq_max_iter

    def solve(self, system: RestrictedSystem) -> SolveOutcome:
        values, iterations = lsq_solve_iterative(
            system.stacked_operator(),
            system.stacked_target(),
            damping=system.epsilon,
            tol=self.tol,
            max_iter=self.max_iter,
        )
        return SolveOutcome(values=values, iterations=iterations, solver=self.name)


class FallbackSolver(MaskSolver):
    """Direct solve first, iterative when the factorization fails"""

    name = "direct+iterative"

    def __init__(self):
        self.direct = DirectSolver()
        self.iterative = IterativeSolver()

    def solve(self, system: RestrictedSystem) -> SolveOutcome:
        try:
            return self.direct.solve(system)
        except SolverError as direct_error:
            logger.warning(
                "Direct mask solve failed, falling back to iterative",
                retained=system.size,
                error=str(direct_error),
            )
            metrics.record_fallback("solver")
            try:
                outcome = self.iterative.solve(system)
            except SolverError as iterative_error:
                raise SolverError(
                    "mask tuning failed with both solvers",
                    direct=str(direct_error),
                    iterative=str(iterative_error),
                    retained=system.size,
                )
            return SolveOutcome(
                values=outcome.values,
                iterations=outcome.iterations,
                solver=outcome.solver,
                fallback=True,
            )


class SolverFactory:
    """Factory for mask tuning solvers"""

    @staticmethod
    def create_solver(kind: SolverKind) -> MaskSolver:
        if kind == SolverKind.DIRECT:
            return FallbackSolver()
        elif kind == SolverKind.ITERATIVE:
            return IterativeSolver()
        else:
            raise SolverError(f"Unknown solver kind: {kind}")
