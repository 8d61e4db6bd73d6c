"""Dense float64 kernels shared by the importance metric and mask tuning.

Matrices and vectors are plain ``numpy`` float64 arrays; ``as_matrix`` and
``as_vector`` are the construction gates that enforce shape and finiteness.
Every routine is a pure function of its inputs.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import eigvalsh, solve_triangular
from scipy.sparse.linalg import LinearOperator, aslinearoperator, lsmr

from ..utils.errors import (
    ConvergenceError,
    DimensionMismatchError,
    NonFiniteError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    SingularMatrixError,
)

Matrix = NDArray[np.float64]
Vector = NDArray[np.float64]

SYMMETRY_RTOL = 1e-9
START_SEED = 20240101


class Which(str, Enum):
    MAX = "max"
    MIN = "min"


@dataclass(frozen=True)
class Eigenpair:
    value: float
    vector: Vector
    iterations: int
    residual: float


def as_matrix(data: ArrayLike, name: str = "matrix") -> Matrix:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {m.shape}", name=name)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} has non-finite entries", name=name)
    return m


def as_vector(data: ArrayLike, name: str = "vector") -> Vector:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {v.shape}", name=name)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} has non-finite entries", name=name)
    return v


def matmul(a: ArrayLike, b: ArrayLike) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatchError(
            f"cannot multiply {a.shape} by {b.shape}",
            left=a.shape,
            right=b.shape,
        )
    return a @ b


def symmetrize(m: ArrayLike, rtol: float = SYMMETRY_RTOL) -> Matrix:
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatchError(f"matrix must be square, got {m.shape}", shape=m.shape)
    scale = np.linalg.norm(m)
    asym = np.linalg.norm(m - m.T)
    if asym > rtol * max(scale, np.finfo(np.float64).tiny):
        raise NotSymmetricError(
            "matrix is not symmetric",
            asymmetry=float(asym),
            norm=float(scale),
        )
    return 0.5 * (m + m.T)


def cholesky_factor(m: ArrayLike) -> Matrix:
    """Lower-triangular L with L @ L.T == m (column-oriented Cholesky-Crout)."""
    m = symmetrize(m)
    n = m.shape[0]
    lower = np.zeros_like(m)
    for j in range(n):
        row = lower[j, :j]
        pivot = m[j, j] - row @ row
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite (pivot {j} = {pivot:.3e})",
                pivot_index=j,
                pivot=float(pivot),
            )
        d = math.sqrt(pivot)
        lower[j, j] = d
        if j + 1 < n:
            lower[j + 1:, j] = (m[j + 1:, j] - lower[j + 1:, :j] @ row) / d
    return lower


def cholesky_solve(lower: ArrayLike, rhs: ArrayLike) -> Vector:
    lower = as_matrix(lower, "factor")
    rhs = np.asarray(rhs, dtype=np.float64)
    if lower.shape[0] != lower.shape[1] or lower.shape[0] != rhs.shape[0]:
        raise DimensionMismatchError(
            f"factor {lower.shape} does not match right-hand side {rhs.shape}",
        )
    diagonal = np.diag(lower)
    zeros = np.flatnonzero(diagonal == 0.0)
    if zeros.size:
        raise SingularMatrixError(
            f"factor has a zero diagonal entry at {int(zeros[0])}",
            index=int(zeros[0]),
        )
    y = solve_triangular(lower, rhs, lower=True, check_finite=False)
    return solve_triangular(lower.T, y, lower=False, check_finite=False)


def _orthonormal(vectors: Sequence[ArrayLike], n: int) -> list:
    basis = []
    for v in vectors:
        w = np.asarray(v, dtype=np.float64).copy()
        for b in basis:
            w -= (b @ w) * b
        norm = np.linalg.norm(w)
        if norm > 0.0:
            basis.append(w / norm)
    return basis


def _project_out(v: Vector, basis: list) -> Vector:
    for b in basis:
        v = v - (b @ v) * b
    return v


def _start_vector(n: int, basis: list) -> Vector:
    # fixed-seed Gaussian; all-ones is an exact eigenvector of many structured matrices
    rng = np.random.default_rng(START_SEED)
    for _ in range(8):
        v = _project_out(rng.standard_normal(n), basis)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            return v / norm
    raise DimensionMismatchError("deflation basis spans the whole space", dim=n)


def _fix_sign(v: Vector) -> Vector:
    k = int(np.argmax(np.abs(v)))
    return -v if v[k] < 0 else v


def _gershgorin_bound(m: Matrix) -> float:
    return float(np.abs(m).sum(axis=1).max())


def deflated_operator(m: ArrayLike, which: Union[Which, str], vectors: Sequence[ArrayLike]) -> Matrix:
    """Explicitly deflated copy of ``m`` whose extreme eigenpair is the next one inward.

    For ``max`` each (orthonormalized) vector ``b`` is removed as ``M - (b'Mb) b b'``;
    for ``min`` it is lifted above the spectrum as ``M + g b b'`` with ``g`` the
    Gershgorin bound, which keeps the operator positive definite.
    """
    which = Which(which)
    m = symmetrize(m)
    basis = _orthonormal(vectors, m.shape[0])
    out = m.copy()
    lift = _gershgorin_bound(m)
    for b in basis:
        weight = -float(b @ m @ b) if which == Which.MAX else lift
        out += weight * np.outer(b, b)
    return 0.5 * (out + out.T)


def extreme_eigpair(
    m: ArrayLike,
    which: Union[Which, str] = Which.MAX,
    tol: float = 1e-10,
    max_iter: Optional[int] = None,
    *,
    deflate: Sequence[ArrayLike] = (),
    factor: Optional[Matrix] = None,
    scale: Optional[float] = None,
) -> Eigenpair:
    """Largest (power iteration) or smallest (inverse iteration) eigenpair of an SPD matrix.

    Converged when ``||M v - lambda v|| <= tol * scale``. ``scale`` defaults to the
    current eigenvalue estimate for ``max`` and to lambda_max of ``m`` for ``min``.
    With ``deflate`` the iteration runs on ``deflated_operator`` and both the
    eigenvalue and the residual are measured on that operator; ``factor`` is then
    ignored since it belongs to the undeflated matrix.
    """
    which = Which(which)
    m = symmetrize(m)
    n = m.shape[0]
    max_iter = max_iter or 10 * n
    basis = _orthonormal(deflate, n)

    if which == Which.MIN and scale is None:
        scale = float(eigvalsh(m, subset_by_index=[n - 1, n - 1], check_finite=False)[0])
    op = deflated_operator(m, which, basis) if basis else m

    lower = None
    if which == Which.MIN:
        lower = factor if factor is not None and not basis else cholesky_factor(op)

    v = _start_vector(n, basis)
    lam = float(v @ op @ v)
    residual = math.inf

    for iteration in range(1, max_iter + 1):
        w = op @ v if which == Which.MAX else cholesky_solve(lower, v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
        mv = op @ v
        lam = float(v @ mv)
        residual = float(np.linalg.norm(mv - lam * v))
        limit = tol * (scale if scale is not None else abs(lam))
        if residual <= limit:
            return Eigenpair(value=lam, vector=_fix_sign(v), iterations=iteration, residual=residual)

    raise ConvergenceError(
        f"{which.value} eigenpair did not converge in {max_iter} iterations",
        iterations=max_iter,
        residual=residual,
        estimate=lam,
        which=which.value,
    )


def _regularized_system(op: LinearOperator, y: Vector, damping: float) -> tuple:
    if damping == 0.0:
        return op, y
    rows, cols = op.shape
    root = math.sqrt(damping)

    def matvec(x):
        x = np.ravel(x)
        return np.concatenate([op.matvec(x), root * x])

    def rmatvec(z):
        z = np.ravel(z)
        return op.rmatvec(z[:rows]) + root * z[rows:]

    stacked = LinearOperator((rows + cols, cols), matvec=matvec, rmatvec=rmatvec, dtype=np.float64)
    return stacked, np.concatenate([y, np.zeros(cols)])


def lsq_solve_iterative(
    a: Union[ArrayLike, LinearOperator],
    y: ArrayLike,
    damping: float = 0.0,
    tol: float = 1e-10,
    max_iter: Optional[int] = None,
    *,
    restarts: int = 3,
) -> tuple:
    """Minimize ``||A x - y||^2 + damping * ||x||^2`` with LSMR.

    Accepts a dense matrix or a ``LinearOperator`` (the stacked token system is
    never materialized). Returns ``(x, iterations)``. The result is accepted only
    when the normal-equation residual ``||A^T (A x - y) + damping x||`` is at most
    ``tol * ||A^T y||``; LSMR is warm-restarted from its last iterate otherwise.
    """
    if isinstance(a, LinearOperator):
        op = a
    else:
        op = aslinearoperator(as_matrix(a, "a"))
    y = as_vector(y, "y")
    rows, cols = op.shape
    if rows < 1 or y.shape[0] != rows:
        raise DimensionMismatchError(f"system {op.shape} does not match y of length {y.shape[0]}")
    if damping < 0.0:
        raise DimensionMismatchError("damping must be non-negative", damping=damping)
    max_iter = max_iter or 20 * cols + 100

    aty = op.rmatvec(y)
    target = tol * float(np.linalg.norm(aty))
    if target == 0.0:
        return np.zeros(cols), 0

    # LSMR damps the correction, not x, when warm-started; stack sqrt(damping)*I instead
    system, rhs = _regularized_system(op, y, damping)
    stop = max(tol * 1e-2, 1e-16)

    x = np.zeros(cols)
    total = 0
    residual = math.inf
    for _ in range(restarts + 1):
        x, _istop, itn, *_ = lsmr(
            system, rhs,
            atol=stop, btol=stop, conlim=0,
            maxiter=max_iter,
            x0=x,
        )
        total += int(itn)
        residual = float(np.linalg.norm(op.rmatvec(op.matvec(x) - y) + damping * x))
        if residual <= target:
            return x, total

    raise ConvergenceError(
        f"iterative least squares did not reach the residual target after {total} iterations",
        iterations=total,
        residual=residual,
        estimate=x,
        target=target,
    )


def sample_variance(v: ArrayLike) -> float:
    v = as_vector(v)
    if v.size == 0:
        raise DimensionMismatchError("variance of an empty vector is undefined")
    if v.size == 1:
        return 0.0
    return float(np.var(v))
