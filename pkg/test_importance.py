import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from comp_pruner.services.importance import (
    closed_form_gradient,
    condition_gradient,
    condition_number,
    eigengap_degenerate,
    finite_difference_gradient,
    layer_importance,
    neuron_importance,
    normal_context,
    null_space_drops,
    rank_neurons,
    resolve_epsilon,
    score_dense,
)
from comp_pruner.utils import ConvergenceError, DimensionMismatchError, ModelError
from comp_pruner.workbench import ActivationTrace, DenseLayer
from conftest import jacobi_eigh


def _trace(inputs, outputs, layer=0):
    inputs = np.asarray(inputs, dtype=np.float64)
    trace = ActivationTrace(batch_shape=(1, inputs.shape[1]), layer_order=[layer])
    trace.layer_inputs[layer] = inputs
    trace.layer_outputs[layer] = np.asarray(outputs, dtype=np.float64)
    return trace


class TestLayerImportance:
    def test_positive_scaling_is_redundant(self, rng):
        x = rng.standard_normal((4, 10))
        score = layer_importance(_trace(x, 3.0 * x), 0)
        assert score.importance == pytest.approx(0.0, abs=1e-12)
        assert score.redundancy == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_outputs(self):
        x = np.zeros((2, 5))
        x[0] = np.arange(1, 6)
        y = np.zeros((2, 5))
        y[1] = 2.0
        assert layer_importance(_trace(x, y), 0).importance == pytest.approx(1.0)

    def test_antiparallel_outputs(self, rng):
        x = rng.standard_normal((3, 7))
        assert layer_importance(_trace(x, -x), 0).importance == pytest.approx(2.0)

    def test_zero_token_skipped(self, rng):
        x = rng.standard_normal((3, 6))
        y = x.copy()
        x[:, 2] = 0.0
        score = layer_importance(_trace(x, y), 0)
        assert score.skipped_tokens == 1
        assert score.importance == pytest.approx(0.0, abs=1e-12)

    def test_all_tokens_zero(self):
        with pytest.raises(ModelError):
            layer_importance(_trace(np.zeros((2, 3)), np.ones((2, 3))), 0)

    def test_missing_layer(self, rng):
        with pytest.raises(ModelError):
            layer_importance(_trace(rng.standard_normal((2, 3)), rng.standard_normal((2, 3))), 4)


class TestNormalMatrix:
    def test_diagonal_construction(self):
        ctx = normal_context(np.eye(2), [2.0, 1.0])
        assert ctx.epsilon == pytest.approx(2.5e-6)
        assert_allclose(ctx.m, np.diag([4.0, 1.0]), atol=1e-5)

    def test_zero_input_mean(self, rng):
        ctx = normal_context(rng.standard_normal((5, 3)), np.zeros(3))
        assert_allclose(ctx.m, ctx.epsilon * np.eye(3))
        assert condition_number(ctx) == pytest.approx(1.0)
        g, fallback = condition_gradient(ctx)
        assert_array_equal(g, 0.0)
        assert not fallback

    def test_matches_explicit_product(self, rng):
        w = rng.standard_normal((6, 4))
        x_mean = rng.standard_normal(4)
        mask = np.array([1.0, 0.0, 1.0, 1.0])
        ctx = normal_context(w, x_mean, mask, epsilon=1e-3)
        a = w @ np.diag(mask * x_mean)
        assert_allclose(ctx.m, a.T @ a + 1e-3 * np.eye(4), rtol=1e-12, atol=1e-15)

    def test_default_epsilon_floor(self):
        assert resolve_epsilon(np.eye(2), [1e-9, 0.0]) == 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            normal_context(np.eye(3), [1.0, 2.0])

    def test_non_positive_epsilon(self):
        with pytest.raises(DimensionMismatchError):
            normal_context(np.eye(2), [1.0, 2.0], epsilon=0.0)


class TestConditionNumber:
    def test_identity(self):
        ctx = normal_context(np.eye(3), np.ones(3), epsilon=1e-12)
        assert condition_number(ctx) == pytest.approx(1.0, rel=1e-9)

    def test_diagonal_ratio(self):
        ctx = normal_context(np.eye(2), [2.0, 1.0], epsilon=1e-12)
        assert condition_number(ctx) == pytest.approx(4.0, rel=1e-9)

    def test_matches_jacobi_oracle(self, rng):
        ctx = normal_context(rng.standard_normal((12, 8)), rng.uniform(0.5, 2.0, 8), epsilon=1e-6)
        values, _ = jacobi_eigh(ctx.m)
        assert condition_number(ctx) == pytest.approx(values[-1] / values[0], rel=1e-8)


class TestConditionGradient:
    def test_diagonal_example(self):
        ctx = normal_context(np.eye(2), [2.0, 1.0], epsilon=1e-12)
        g, fallback = condition_gradient(ctx)
        assert not fallback
        assert_allclose(g, [8.0, -8.0], rtol=1e-6)
        assert_allclose(finite_difference_gradient(ctx, 1e-5), [8.0, -8.0], rtol=1e-6)

    def test_rebuilds_for_another_input_mean(self):
        ctx = normal_context(np.eye(2), [2.0, 1.0], epsilon=1e-12)
        g, _ = condition_gradient(ctx, x_mean=[0.0, 0.0])
        assert_array_equal(g, 0.0)

    @pytest.mark.parametrize("shape", [(6, 4), (10, 5), (16, 12)])
    def test_closed_form_matches_finite_differences(self, rng, shape):
        w = rng.standard_normal(shape)
        x_mean = rng.uniform(0.5, 1.5, shape[1])
        ctx = normal_context(w, x_mean, epsilon=1e-8)
        assert not eigengap_degenerate(ctx)
        closed = closed_form_gradient(ctx)
        numeric = finite_difference_gradient(ctx, 1e-5)
        assert np.linalg.norm(closed - numeric) <= 1e-4 * np.linalg.norm(closed)

    def test_scale_invariance(self, rng):
        w = rng.standard_normal((7, 4))
        x_mean = rng.uniform(0.5, 1.5, 4)
        base = normal_context(w, x_mean)
        scaled = normal_context(2.0 * w, x_mean)
        assert condition_number(scaled) == pytest.approx(condition_number(base), rel=1e-8)
        assert_allclose(closed_form_gradient(scaled), closed_form_gradient(base), rtol=1e-6, atol=1e-9)

    def test_repeated_eigenvalue_uses_finite_differences(self):
        ctx = normal_context(np.eye(3), np.ones(3))
        assert eigengap_degenerate(ctx)
        g, fallback = condition_gradient(ctx)
        assert fallback
        assert np.all(np.abs(g) <= 1e-3)

    def test_gap_check_with_repeated_top_eigenvalue(self):
        separated = normal_context(np.diag([1.0, 1.1, 0.5]), np.ones(3), epsilon=1e-12)
        assert not eigengap_degenerate(separated)
        repeated = normal_context(np.diag([1.0, 1.0, 0.5]), np.ones(3), epsilon=1e-12)
        assert eigengap_degenerate(repeated)

    def test_gap_check_uses_dense_solver_when_deflation_stalls(self, monkeypatch):
        from comp_pruner.services import importance

        separated = normal_context(np.diag([3.0, 2.0, 1.0]), np.ones(3), epsilon=1e-12)
        repeated = normal_context(np.eye(3), np.ones(3))

        def stalled(*args, **kwargs):
            raise ConvergenceError("stalled", iterations=1, residual=1.0, estimate=0.0)

        monkeypatch.setattr(importance, "extreme_eigpair", stalled)
        assert not eigengap_degenerate(separated)
        assert eigengap_degenerate(repeated)

    def test_fallback_can_be_disabled(self):
        ctx = normal_context(np.eye(3), np.ones(3))
        _, fallback = condition_gradient(ctx, allow_fallback=False)
        assert not fallback


class TestNeuronImportance:
    def test_second_order_expansion(self):
        ctx = normal_context(np.eye(2), [2.0, 1.0], epsilon=1e-12)
        scores = neuron_importance(ctx, [8.0, -8.0], layer=3, dense="up_proj")
        assert_array_equal(scores.importance, [24.0, 40.0])
        assert (scores.layer, scores.dense) == (3, "up_proj")
        assert rank_neurons(scores) == [0, 1]

    def test_flat_gradient(self):
        ctx = normal_context(np.eye(3), np.zeros(3))
        assert_array_equal(neuron_importance(ctx, np.zeros(3)).importance, 0.0)

    def test_pruned_position_ranked_last(self):
        ctx = normal_context(np.eye(3), np.ones(3), mask=[1.0, 0.0, 1.0])
        scores = neuron_importance(ctx, [1.0, -5.0, 1.0])
        assert math.isinf(scores.importance[1])
        assert rank_neurons(scores)[-1] == 1

    def test_ties_keep_index_order(self):
        assert rank_neurons(np.full(5, 0.25)) == [0, 1, 2, 3, 4]

    def test_gradient_shape_checked(self):
        ctx = normal_context(np.eye(2), [1.0, 2.0])
        with pytest.raises(DimensionMismatchError):
            neuron_importance(ctx, [1.0, 2.0, 3.0])

    def test_score_dense(self, rng):
        dense = DenseLayer.from_arrays("down_proj", rng.standard_normal((4, 6)))
        dense.set_masks([1.0, 1.0, 0.0, 1.0, 1.0, 1.0])
        scores = score_dense(dense, rng.uniform(0.5, 1.5, 6), layer=2)
        assert scores.dense == "down_proj" and scores.layer == 2
        assert scores.kappa >= 1.0
        assert math.isinf(scores.importance[2])
        assert np.all(np.isfinite(np.delete(scores.importance, 2)))


class TestNullSpace:
    def test_duplicated_input_pruned_first(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            weight = rng.standard_normal((12, 8))
            weight[:, 1] = weight[:, 0]
            inputs = rng.standard_normal((8, 32)) + 0.5
            inputs[1] = inputs[0]
            dense = DenseLayer.from_arrays("up_proj", weight)
            scores = score_dense(dense, inputs.mean(axis=1))
            assert rank_neurons(scores)[0] in (0, 1), seed
            assert np.all(scores.importance[:2] < np.min(scores.importance[2:]))

    def test_drop_restores_full_rank(self, rng):
        weight = rng.standard_normal((6, 4))
        weight[:, 3] = 2.0 * weight[:, 2]
        x_mean = np.array([1.0, 0.5, 1.0, 0.5])
        ctx = normal_context(weight, x_mean)
        assert ctx.null_space
        drops = null_space_drops(ctx)
        assert sorted(drops) == [2, 3]
        kept = np.array([0, 1, 3])
        values = np.linalg.eigvalsh(ctx.m[np.ix_(kept, kept)])
        assert drops[2] == pytest.approx(values[-1] / values[0] - condition_number(ctx), rel=1e-6)

    def test_full_rank_has_no_drops(self, rng):
        ctx = normal_context(rng.standard_normal((10, 5)), rng.uniform(0.5, 1.5, 5))
        assert not ctx.null_space
        assert null_space_drops(ctx) == {}

    def test_wide_dense_keeps_expansion(self, rng):
        # two or more null directions: removing one input leaves lam_min at eps
        ctx = normal_context(rng.standard_normal((3, 6)), rng.uniform(0.5, 1.5, 6))
        assert ctx.null_space
        assert null_space_drops(ctx) == {}
        g, _ = condition_gradient(ctx)
        assert_allclose(neuron_importance(ctx, g).importance, -g + 0.5 * g * g)

    def test_zero_input_mean_is_dropped_first(self, rng):
        x_mean = rng.uniform(0.5, 1.5, 5)
        x_mean[3] = 0.0
        scores = score_dense(DenseLayer.from_arrays("up_proj", rng.standard_normal((9, 5))), x_mean)
        assert rank_neurons(scores)[0] == 3


def test_gradient_oracle_over_random_denses(rng):
    checked = null_space = 0
    for _ in range(200):
        p, q = (int(k) for k in rng.integers(2, 17, size=2))
        w = rng.standard_normal((p, q))
        x_mean = rng.uniform(0.5, 1.5, q)
        ctx = normal_context(w, x_mean, epsilon=1e3 * resolve_epsilon(w, x_mean))
        if eigengap_degenerate(ctx):
            continue
        closed = closed_form_gradient(ctx)
        numeric = finite_difference_gradient(ctx, 1e-5)
        # absolute floor at the finite-difference noise level of the largest component
        floor = 1e-6 * np.max(np.abs(closed))
        assert np.all(np.abs(closed - numeric) <= 1e-4 * np.abs(closed) + floor), (p, q)
        checked += 1
        null_space += ctx.null_space
    assert checked >= 190
    assert null_space >= 50


def test_ranking_invariant_under_input_scaling(rng):
    for _ in range(100):
        p, q = int(rng.integers(2, 17)), int(rng.integers(2, 13))
        dense = DenseLayer.from_arrays("up_proj", rng.standard_normal((p, q)))
        binary = np.ones(q)
        binary[rng.choice(q, size=int(rng.integers(0, q - 1)), replace=False)] = 0.0
        dense.set_masks(binary)
        x_mean = rng.uniform(0.5, 1.5, q)
        factor = float(2.0 ** rng.integers(-3, 4))
        base = score_dense(dense, x_mean)
        scaled = score_dense(dense, factor * x_mean)
        assert_allclose(scaled.importance, base.importance, rtol=1e-9)
        assert rank_neurons(scaled) == rank_neurons(base)
