"""Layer importance from input/output redundancy and neuron importance from
the condition number of the regularized normal matrix.

For a dense with weight W (p x q), token-mean input x_bar and binary mask m:

    A = W Diag(m * x_bar)        M = A^T A + eps I        kappa = lam_max / lam_min

The gradient of kappa with respect to m comes from first-order eigenvalue
perturbation of M and needs only the two extreme eigenpairs.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import eigh, eigvalsh, svdvals

from ..config import settings
from ..models import LayerScore
from ..utils import get_logger, ConvergenceError, DimensionMismatchError, ModelError
from ..workbench import ActivationTrace, DenseLayer
from .linalg import (
    Eigenpair,
    Matrix,
    Vector,
    Which,
    as_matrix,
    as_vector,
    cholesky_factor,
    extreme_eigpair,
)
from .metrics import metrics

logger = get_logger(__name__)

EPSILON_SCALE = 1e-6
EPSILON_FLOOR = 1e-10
# lam_min within this factor of eps means A has a null space
NULL_SPACE_RTOL = 1e-6
NULL_SUPPORT_RTOL = 1e-6


def layer_importance(trace: ActivationTrace, layer: int) -> LayerScore:
    """1 - mean cosine(X^l_t, X^{l+1}_t) over tokens with non-zero vectors on both sides."""
    inputs, outputs = trace.layer_pair(layer)
    in_norm = np.linalg.norm(inputs, axis=0)
    out_norm = np.linalg.norm(outputs, axis=0)
    keep = (in_norm > 0.0) & (out_norm > 0.0)
    skipped = int((~keep).sum())
    if not keep.any():
        raise ModelError(f"every token of layer {layer} has a zero-norm input or output", layer=layer)
    cosine = (inputs[:, keep] * outputs[:, keep]).sum(axis=0) / (in_norm[keep] * out_norm[keep])
    redundancy = float(np.clip(cosine, -1.0, 1.0).mean())
    if skipped:
        logger.debug("Zero-norm tokens skipped", layer=layer, skipped=skipped)
    return LayerScore(layer=layer, redundancy=redundancy, importance=1.0 - redundancy, skipped_tokens=skipped)


def layer_scores(trace: ActivationTrace, layers: Sequence[int]) -> List[LayerScore]:
    return [layer_importance(trace, layer) for layer in layers]


@dataclass(frozen=True)
class NormalMatrixContext:
    weight: Matrix
    x_mean: Vector
    mask: Vector
    epsilon: float
    a: Matrix
    m: Matrix
    factor: Matrix
    top: Eigenpair
    bottom: Eigenpair

    @property
    def lambda_max(self) -> float:
        return self.top.value

    @property
    def lambda_min(self) -> float:
        return self.bottom.value

    @property
    def null_space(self) -> bool:
        return self.lambda_min <= self.epsilon * (1.0 + NULL_SPACE_RTOL)

    @property
    def flat(self) -> bool:
        """A is numerically zero, so M = eps I and kappa is pinned at 1."""
        return self.lambda_max <= self.epsilon * (1.0 + NULL_SPACE_RTOL)


@dataclass(frozen=True)
class NeuronScores:
    layer: int
    dense: str
    importance: Vector
    gradient: Vector
    kappa: float
    epsilon: float
    gradient_fallback: bool = False


def _check_inputs(weight: ArrayLike, x_mean: ArrayLike, mask: Optional[ArrayLike]):
    weight = as_matrix(weight, "weight")
    x_mean = as_vector(x_mean, "x_mean")
    q = weight.shape[1]
    if x_mean.shape[0] != q:
        raise DimensionMismatchError(f"x_mean has {x_mean.shape[0]} entries, dense has {q} inputs")
    mask = np.ones(q) if mask is None else as_vector(mask, "mask")
    if mask.shape[0] != q:
        raise DimensionMismatchError(f"mask has {mask.shape[0]} entries, dense has {q} inputs")
    return weight, x_mean, mask


def resolve_epsilon(weight: ArrayLike, x_mean: ArrayLike, mask: Optional[ArrayLike] = None,
                    epsilon: Optional[float] = None) -> float:
    """Explicit eps, or 1e-6 * trace(A^T A) / q floored at 1e-10."""
    if epsilon is not None:
        if not epsilon > 0.0:
            raise DimensionMismatchError("epsilon must be positive", epsilon=epsilon)
        return float(epsilon)
    weight, x_mean, mask = _check_inputs(weight, x_mean, mask)
    a = weight * (mask * x_mean)[None, :]
    return max(EPSILON_SCALE * float(np.sum(a * a)) / weight.shape[1], EPSILON_FLOOR)


def normal_context(weight: ArrayLike, x_mean: ArrayLike, mask: Optional[ArrayLike] = None,
                   epsilon: Optional[float] = None) -> NormalMatrixContext:
    weight, x_mean, mask = _check_inputs(weight, x_mean, mask)
    epsilon = resolve_epsilon(weight, x_mean, mask, epsilon)
    a = weight * (mask * x_mean)[None, :]
    m = a.T @ a + epsilon * np.eye(weight.shape[1])
    m = 0.5 * (m + m.T)
    factor = cholesky_factor(m)
    top = extreme_eigpair(m, Which.MAX, tol=settings.eig_tol, max_iter=settings.eig_max_iter)
    bottom = extreme_eigpair(
        m, Which.MIN,
        tol=settings.eig_tol,
        max_iter=settings.eig_max_iter,
        factor=factor,
        scale=top.value,
    )
    return NormalMatrixContext(
        weight=weight, x_mean=x_mean, mask=mask, epsilon=epsilon,
        a=a, m=m, factor=factor, top=top, bottom=bottom,
    )


def build_normal_context(dense: DenseLayer, x_mean: ArrayLike,
                         epsilon: Optional[float] = None) -> NormalMatrixContext:
    binary, _ = dense.mask_arrays()
    return normal_context(dense.weight_matrix(), x_mean, binary, epsilon)


def condition_number(ctx: NormalMatrixContext) -> float:
    return max(ctx.lambda_max / ctx.lambda_min, 1.0)


def _eigen_derivative(ctx: NormalMatrixContext, v: Vector) -> Vector:
    # d(v^T M v)/dm_j for M = Diag(u) S Diag(u) + eps I, u = m * x_bar, S = W^T W
    u = ctx.mask * ctx.x_mean
    s_uv = ctx.weight.T @ (ctx.weight @ (u * v))
    return 2.0 * ctx.x_mean * v * s_uv


def _next_inward(ctx: NormalMatrixContext, which: Which, pair: Eigenpair) -> float:
    """Next eigenvalue inward from an extreme pair, deflating that pair."""
    try:
        inner = extreme_eigpair(
            ctx.m, which,
            tol=settings.gap_tolerance,
            max_iter=settings.eig_max_iter,
            deflate=[pair.vector],
            scale=ctx.lambda_max,
        )
        return inner.value
    except ConvergenceError as e:
        logger.warning(
            "Deflated eigenpair did not converge, using dense solver",
            which=which.value,
            iterations=e.iterations,
            residual=e.residual,
        )
    n = ctx.m.shape[0]
    index = n - 2 if which == Which.MAX else 1
    return float(eigvalsh(ctx.m, subset_by_index=[index, index], check_finite=False)[0])


def eigengap_degenerate(ctx: NormalMatrixContext) -> bool:
    """True when an extreme eigenvalue that contributes to the gradient is not simple."""
    if ctx.flat or ctx.m.shape[0] < 2:
        return False
    threshold = settings.gap_tolerance * ctx.lambda_max
    if ctx.lambda_max - _next_inward(ctx, Which.MAX, ctx.top) < threshold:
        return True
    if not ctx.null_space and _next_inward(ctx, Which.MIN, ctx.bottom) - ctx.lambda_min < threshold:
        return True
    return False


def _kappa_at(ctx: NormalMatrixContext, mask: Vector) -> float:
    # perturbed matrices sit next to the eigenvalue crossing, where power iteration stalls;
    # singular values of [A; sqrt(eps) I] keep lam_min accurate relative to lam_max
    a = ctx.weight * (mask * ctx.x_mean)[None, :]
    stacked = np.vstack([a, np.sqrt(ctx.epsilon) * np.eye(mask.shape[0])])
    sigma = svdvals(stacked, check_finite=False)
    return float((sigma[0] / sigma[-1]) ** 2)


def finite_difference_gradient(ctx: NormalMatrixContext, step: Optional[float] = None) -> Vector:
    """Central differences of kappa(m) with eps held fixed."""
    step = step or settings.fd_step
    q = ctx.mask.shape[0]
    g = np.zeros(q)
    for j in range(q):
        plus, minus = ctx.mask.copy(), ctx.mask.copy()
        plus[j] += step
        minus[j] -= step
        g[j] = (_kappa_at(ctx, plus) - _kappa_at(ctx, minus)) / (2.0 * step)
    return g


def closed_form_gradient(ctx: NormalMatrixContext) -> Vector:
    if ctx.flat:
        return np.zeros_like(ctx.mask)
    lam_max, lam_min = ctx.lambda_max, ctx.lambda_min
    d_max = _eigen_derivative(ctx, ctx.top.vector)
    # every eigenvector at eps lies in the null space of A, where M does not move
    d_min = np.zeros_like(d_max) if ctx.null_space else _eigen_derivative(ctx, ctx.bottom.vector)
    return (d_max * lam_min - lam_max * d_min) / (lam_min * lam_min)


def condition_gradient(ctx: NormalMatrixContext, x_mean: Optional[ArrayLike] = None,
                       *, allow_fallback: bool = True):
    """d kappa / d m at the current mask. Returns ``(g, used_fallback)``."""
    if x_mean is not None:
        x_mean = as_vector(x_mean, "x_mean")
        if not np.array_equal(x_mean, ctx.x_mean):
            ctx = normal_context(ctx.weight, x_mean, ctx.mask, ctx.epsilon)
    if allow_fallback and eigengap_degenerate(ctx):
        logger.warning(
            "Extreme eigenvalue is not simple, using finite differences",
            q=int(ctx.mask.shape[0]),
            lambda_max=ctx.lambda_max,
            lambda_min=ctx.lambda_min,
        )
        metrics.record_fallback("gradient")
        return finite_difference_gradient(ctx), True
    return closed_form_gradient(ctx), False


def _retained_kappa(m: Matrix, keep: NDArray) -> float:
    values = eigvalsh(m[np.ix_(keep, keep)], check_finite=False)
    return float(values[-1] / values[0])


def null_space_drops(ctx: NormalMatrixContext) -> Dict[int, float]:
    """Exact kappa change for retained inputs whose removal makes the retained system full rank.

    Only a one-dimensional null space of the retained columns qualifies: dropping any
    input in the support of its null vector lifts lambda_min off eps, which the
    second-order expansion cannot see because lambda_min does not move to first order.
    """
    if ctx.flat or not ctx.null_space:
        return {}
    retained = np.flatnonzero(ctx.mask != 0.0)
    if retained.size < 2:
        return {}
    values, vectors = eigh(ctx.m[np.ix_(retained, retained)], check_finite=False)
    if int(np.sum(values <= ctx.epsilon * (1.0 + NULL_SPACE_RTOL))) != 1:
        return {}
    null = np.abs(vectors[:, 0])
    base = float(values[-1] / values[0])
    return {
        int(retained[i]): _retained_kappa(ctx.m, np.delete(retained, i)) - base
        for i in np.flatnonzero(null > NULL_SUPPORT_RTOL * null.max())
    }


def neuron_importance(ctx: NormalMatrixContext, g: ArrayLike, *, layer: int = -1, dense: str = "",
                      gradient_fallback: bool = False) -> NeuronScores:
    g = as_vector(g, "g")
    if g.shape != ctx.mask.shape:
        raise DimensionMismatchError("gradient does not match the dense inputs")
    importance = -g + 0.5 * g * g
    drops = null_space_drops(ctx)
    if drops:
        logger.debug(
            "Null-space inputs scored by exact kappa change",
            layer=layer,
            dense=dense,
            inputs=sorted(drops),
        )
        importance[list(drops)] = list(drops.values())
    importance = np.where(ctx.mask == 0.0, np.inf, importance)
    return NeuronScores(
        layer=layer,
        dense=dense,
        importance=importance,
        gradient=g,
        kappa=condition_number(ctx),
        epsilon=ctx.epsilon,
        gradient_fallback=gradient_fallback,
    )


def rank_neurons(scores: Union[NeuronScores, ArrayLike]) -> List[int]:
    """Ascending importance, ties to the lower index, pruned (+inf) positions last."""
    values = scores.importance if isinstance(scores, NeuronScores) else np.asarray(scores, dtype=np.float64)
    return [int(i) for i in np.argsort(values, kind="stable")]


def score_dense(dense: DenseLayer, x_mean: ArrayLike, epsilon: Optional[float] = None,
                *, layer: int = -1) -> NeuronScores:
    ctx = build_normal_context(dense, x_mean, epsilon)
    g, fallback = condition_gradient(ctx)
    scores = neuron_importance(ctx, g, layer=layer, dense=dense.name, gradient_fallback=fallback)
    logger.debug(
        "Dense scored",
        layer=layer,
        dense=dense.name,
        kappa=scores.kappa,
        epsilon=scores.epsilon,
        fallback=fallback,
    )
    return scores
