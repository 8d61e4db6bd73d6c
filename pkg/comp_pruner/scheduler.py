"""Hybrid pruning pipeline: iterative layer removal, importance-weighted ratio
allocation, then per-layer neuron pruning under an escalating variance
threshold on the tuned masks.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from numpy.typing import NDArray

from .config import InputPolicy, LayerOrder, Strategy
from .models import (
    DenseReport,
    EvalMetrics,
    LayerAllocation,
    LayerRemoval,
    LayerScore,
    PruneConfig,
    PruneReport,
    RatioPlan,
)
from .services import (
    NeuronScores,
    TuneProblem,
    TuneResult,
    layer_scores,
    metrics,
    rank_neurons,
    resolve_epsilon,
    score_dense,
    tune_mask,
)
from .utils import get_logger, CompError, InfeasibleConfigError
from .workbench import (
    ActivationTrace,
    DenseLayer,
    TransformerLayer,
    TransformerModel,
    byte_tokenize,
    fidelity,
    fidelity_from_logits,
    fold_masks,
    forward,
    forward_capture,
    perplexity,
    position_of,
    remove_layer,
    strip_tuning,
)

logger = get_logger(__name__)

IMPORTANCE_FLOOR = 1e-12
RATIO_TOLERANCE = 0.01

TokenBatch = NDArray[np.int64]


def resolve_exempt(model: TransformerModel, exempt_layers: Optional[Sequence[int]] = None) -> Set[int]:
    """Original indices protected from removal and neuron pruning; default first two and last."""
    if exempt_layers is not None:
        return set(exempt_layers)
    indices = model.layer_indices
    return {indices[0], indices[1], indices[-1]} if len(indices) >= 3 else set(indices)


def calibration_batches(corpus: bytes, cfg: PruneConfig) -> Tuple[TokenBatch, TokenBatch]:
    """Calibration windows drawn with ``seed``, evaluation windows with ``seed + 1``."""
    spec = cfg.calibration
    calib = byte_tokenize(corpus, spec.seq_len, spec.n_samples, cfg.seed)
    evaluation = byte_tokenize(corpus, spec.seq_len, cfg.eval_samples, cfg.seed + 1)
    return calib, evaluation


def capture(model: TransformerModel, calib: TokenBatch) -> Tuple[NDArray[np.float64], ActivationTrace]:
    metrics.record_forward_pass()
    return forward_capture(model, calib)


def removable_layers(model: TransformerModel, exempt: Set[int]) -> List[int]:
    return [index for index in model.layer_indices if index not in exempt]


def _argmin_layer(scores: List[LayerScore]) -> LayerScore:
    return min(scores, key=lambda s: (s.importance, s.layer))


def iterative_layer_prune(
    model: TransformerModel,
    calib: TokenBatch,
    n: int,
    exempt: Optional[Set[int]] = None,
    *,
    initial_trace: Optional[ActivationTrace] = None,
) -> Tuple[TransformerModel, List[LayerRemoval]]:
    """Remove ``n`` layers one at a time, re-scoring the current model before each removal."""
    exempt = resolve_exempt(model) if exempt is None else exempt
    if n > len(removable_layers(model, exempt)):
        raise InfeasibleConfigError(
            f"cannot remove {n} layers, only {len(removable_layers(model, exempt))} are not exempt",
            removed_layers=n,
        )
    history: List[LayerRemoval] = []
    trace = initial_trace
    for iteration in range(1, n + 1):
        if trace is None:
            _, trace = capture(model, calib)
        scores = layer_scores(trace, removable_layers(model, exempt))
        victim = _argmin_layer(scores)
        model = remove_layer(model, position_of(model, victim.layer))
        metrics.record_layer_removed()
        history.append(LayerRemoval(iteration=iteration, removed=victim.layer, scores=scores))
        logger.info(
            "Layer phase iteration",
            iteration=iteration,
            removed=victim.layer,
            importance=victim.importance,
        )
        trace = None
    return model, history


def one_shot_layer_prune(
    model: TransformerModel,
    calib: TokenBatch,
    n: int,
    exempt: Optional[Set[int]] = None,
    *,
    initial_trace: Optional[ActivationTrace] = None,
) -> Tuple[TransformerModel, List[LayerRemoval]]:
    """Score once on the given model and remove the ``n`` least important layers."""
    exempt = resolve_exempt(model) if exempt is None else exempt
    candidates = removable_layers(model, exempt)
    if n > len(candidates):
        raise InfeasibleConfigError(f"cannot remove {n} layers, only {len(candidates)} are not exempt")
    if n == 0:
        return model, []
    trace = initial_trace
    if trace is None:
        _, trace = capture(model, calib)
    scores = layer_scores(trace, candidates)
    ranked = sorted(scores, key=lambda s: (s.importance, s.layer))
    history = []
    for iteration, victim in enumerate(ranked[:n], start=1):
        model = remove_layer(model, position_of(model, victim.layer))
        metrics.record_layer_removed()
        history.append(LayerRemoval(iteration=iteration, removed=victim.layer, scores=scores))
    logger.info("One-shot layer phase", removed=[h.removed for h in history])
    return model, history


def layer_prune(model, calib, n, exempt, order: LayerOrder, *, initial_trace=None):
    if order == LayerOrder.ONE_SHOT:
        return one_shot_layer_prune(model, calib, n, exempt, initial_trace=initial_trace)
    return iterative_layer_prune(model, calib, n, exempt, initial_trace=initial_trace)


def allocate_ratios(
    importances: Mapping[int, float],
    ratio: float,
    total_params: int,
    removed_params: int,
    layer_params: Mapping[int, int],
    capacities: Optional[Mapping[int, int]] = None,
) -> RatioPlan:
    """Split the remaining budget r*N - sum(removed N_l) by normalized inverse importance.

    Budgets above a layer's capacity are clipped and the excess is spread over
    the unclipped layers in proportion to their weights until nothing clips.
    """
    total_budget = ratio * total_params - removed_params
    if total_budget < -1e-9 * max(total_params, 1):
        raise InfeasibleConfigError(
            f"removed layers already exceed the target ratio {ratio}: lower the number of removed layers or raise the ratio",
            ratio=ratio,
            removed_params=removed_params,
        )
    # r * N is a float product; a rounding remainder is not a budget
    if total_budget <= 1e-9 * max(total_params, 1):
        total_budget = 0.0
    layers = sorted(importances)
    if not layers:
        return RatioPlan(total_budget=total_budget, allocations=[])

    capacities = capacities or layer_params
    if sum(capacities[l] for l in layers) < total_budget:
        raise InfeasibleConfigError(
            f"neuron budget {total_budget:.0f} exceeds the prunable capacity of the remaining layers: "
            "raise the number of removed layers or lower the ratio",
            budget=total_budget,
        )

    floored = {}
    for layer in layers:
        value = importances[layer]
        if value < IMPORTANCE_FLOOR:
            logger.warning("Layer importance floored", layer=layer, importance=value, floor=IMPORTANCE_FLOOR)
            value = IMPORTANCE_FLOOR
        floored[layer] = value
    inverse = {layer: 1.0 / floored[layer] for layer in layers}
    norm = sum(inverse.values())
    weights = {layer: inverse[layer] / norm for layer in layers}

    budgets: Dict[int, float] = {}
    clipped_layers: Set[int] = set()
    active = list(layers)
    remaining = total_budget
    while active:
        share = sum(weights[l] for l in active)
        proposal = {l: weights[l] / share * remaining for l in active}
        clipped = [l for l in active if proposal[l] > capacities[l]]
        if not clipped:
            budgets.update(proposal)
            break
        for l in clipped:
            budgets[l] = float(capacities[l])
            remaining -= capacities[l]
            clipped_layers.add(l)
        active = [l for l in active if l not in clipped]

    allocations = [
        LayerAllocation(
            layer=l,
            importance=importances[l],
            weight=weights[l],
            ratio=budgets[l] / layer_params[l],
            budget=budgets[l],
            params=layer_params[l],
            capacity=capacities[l],
            clipped=l in clipped_layers,
        )
        for l in layers
    ]
    logger.info("Ratios allocated", total_budget=total_budget, layers=len(layers))
    return RatioPlan(total_budget=total_budget, allocations=allocations)


class DensePruner:
    """Grow-and-tune state of one dense during the neuron phase."""

    def __init__(self, layer: int, dense: DenseLayer, inputs: NDArray[np.float64], cfg: PruneConfig):
        self.layer = layer
        self.dense = dense
        self.cfg = cfg
        self.x_mean = inputs.mean(axis=1)
        q = dense.in_features
        weight = dense.weight_matrix()
        self.mask, _ = dense.mask_arrays()
        self.epsilon = resolve_epsilon(weight, self.x_mean, self.mask, cfg.epsilon)
        self.scores: NeuronScores = score_dense(dense, self.x_mean, self.epsilon, layer=layer)
        self.order = self._prunable(rank_neurons(self.scores))
        self.problem = TuneProblem.create(
            weight, inputs, self.mask, self.epsilon,
            solver=cfg.solver, layer=layer, dense=dense.name,
        )
        self.cap = int(math.floor(cfg.dense_cap * q))
        self.step = cfg.neuron_step or max(1, q // 64)
        self.result: Optional[TuneResult] = None
        self.threshold = 0.0
        self.iterations = 0
        self.solver_fallback = False
        self.gradient_fallback = self.scores.gradient_fallback

    def _prunable(self, ranking: List[int]) -> List[int]:
        return [i for i in ranking if self.mask[i] == 1.0]

    @property
    def pruned(self) -> int:
        return int((self.mask == 0.0).sum())

    @property
    def capped(self) -> bool:
        return self.pruned >= self.cap

    @property
    def variance(self) -> float:
        return self.result.variance if self.result is not None else 0.0

    def grow(self, count: int) -> int:
        """Prune the next ``count`` neurons in ranking order, retune; returns parameters removed."""
        take = self.order[:count]
        self.order = self.order[count:]
        self.mask[take] = 0.0
        self.problem = self.problem.with_mask(self.mask)
        self.result = tune_mask(self.problem)
        self.dense.set_masks(self.mask, self.result.tuned_mask)
        self.iterations += self.result.solver_iterations
        self.solver_fallback |= self.result.solver_fallback
        metrics.record_neurons_pruned(self.dense.name, len(take))
        if self.cfg.recompute_importance and self.order:
            self.scores = score_dense(self.dense, self.x_mean, self.epsilon, layer=self.layer)
            self.gradient_fallback |= self.scores.gradient_fallback
            self.order = self._prunable(rank_neurons(self.scores))
        logger.debug(
            "Dense pruning step",
            layer=self.layer,
            dense=self.dense.name,
            pruned=self.pruned,
            variance=self.variance,
        )
        return len(take) * self.dense.out_features

    def report(self) -> DenseReport:
        return DenseReport(
            layer=self.layer,
            dense=self.dense.name,
            in_features=self.dense.in_features,
            out_features=self.dense.out_features,
            pruned=self.pruned,
            pruned_params=self.pruned * self.dense.out_features,
            cap_hit=self.capped,
            variance_threshold=self.threshold,
            variance=self.variance,
            reconstruction_rms=self.result.residual if self.result is not None else 0.0,
            kappa=self.scores.kappa,
            gradient_fallback=self.gradient_fallback,
            solver_fallback=self.solver_fallback,
            solver_iterations=self.iterations,
        )


@dataclass
class LayerNeuronOutcome:
    layer: int
    denses: List[DenseReport] = field(default_factory=list)
    pruned_params: int = 0
    budget: float = 0.0
    shortfall: bool = False
    threshold: float = 0.0


def prune_layer_neurons(
    layer: TransformerLayer,
    trace: ActivationTrace,
    budget: float,
    cfg: PruneConfig,
) -> LayerNeuronOutcome:
    """Prune input neurons of one layer until ``budget`` parameters are gone.

    ``budget`` is r_l * N_l. Dense inputs come from ``trace``, which the caller
    takes from the original model under the identical-input policy.
    """
    outcome = LayerNeuronOutcome(layer=layer.index, budget=budget)
    if budget <= 0.0:
        outcome.denses = [_untouched_report(layer.index, dense) for dense in layer.denses.values()]
        return outcome

    pruners = [
        DensePruner(layer.index, dense, trace.dense_input(layer.index, name), cfg)
        for name, dense in layer.denses.items()
    ]
    var_step = cfg.var_step
    v_t = 0.0
    done = 0
    while done < budget:
        active = [p for p in pruners if not p.capped]
        if not active:
            outcome.shortfall = True
            logger.warning(
                "Every dense hit its cap before the layer budget was met",
                layer=layer.index,
                budget=budget,
                pruned_params=done,
            )
            break
        v_t += var_step
        grew = False
        for pruner in pruners:
            while done < budget and not pruner.capped and pruner.variance < v_t:
                columns = math.ceil((budget - done) / pruner.dense.out_features)
                done += pruner.grow(min(pruner.step, pruner.cap - pruner.pruned, columns))
                pruner.threshold = v_t
                grew = True
        if not grew:
            lowest = min(p.variance for p in active)
            # next round lands on the first multiple of var_step above the lowest variance
            v_t = max(v_t, var_step * math.floor(lowest / var_step))
            logger.debug("Variance threshold jump", layer=layer.index, v_t=v_t + var_step, lowest=lowest)

    outcome.pruned_params = done
    outcome.threshold = v_t
    outcome.denses = [p.report() for p in pruners]
    logger.info(
        "Layer neuron phase finished",
        layer=layer.index,
        budget=budget,
        pruned_params=done,
        v_t=v_t,
        shortfall=outcome.shortfall,
    )
    return outcome


def _untouched_report(layer: int, dense: DenseLayer) -> DenseReport:
    return DenseReport(
        layer=layer,
        dense=dense.name,
        in_features=dense.in_features,
        out_features=dense.out_features,
        pruned=dense.pruned_count,
        pruned_params=dense.pruned_params,
    )


def layer_param_counts(model: TransformerModel) -> Dict[int, int]:
    return {layer.index: layer.param_count for layer in model.layers}


def evaluate_pruned(
    original: TransformerModel,
    pruned: TransformerModel,
    eval_tokens: TokenBatch,
    report: PruneReport,
) -> None:
    """Fill before/after perplexity and fidelity on the evaluation windows."""
    report.before = EvalMetrics(perplexity=perplexity(original, eval_tokens), kl=0.0, logit_mse=0.0)
    kl, mse = fidelity(original, pruned, eval_tokens)
    report.after = EvalMetrics(perplexity=perplexity(pruned, eval_tokens), kl=kl, logit_mse=mse)


def finish_accounting(report: PruneReport, pruned_model: TransformerModel, strategy: str) -> None:
    total = report.total_params
    neuron_params = sum(layer.pruned_params for layer in pruned_model.layers)
    report.neuron_pruned_params = neuron_params
    pruned = report.removed_params + neuron_params
    report.achieved_ratio = pruned / total if total else 0.0
    target = report.target_ratio * total
    if report.achieved_ratio < report.target_ratio - RATIO_TOLERANCE or report.shortfall:
        report.shortfall = True
        report.shortfall_params = max(target - pruned, 0.0)
    metrics.set_achieved_ratio(strategy, report.achieved_ratio)


class PruneScheduler:
    """Runs the hybrid pipeline on one model and corpus."""

    def __init__(self, cfg: PruneConfig):
        self.cfg = cfg

    def run(self, model: TransformerModel, corpus: bytes) -> Tuple[TransformerModel, PruneReport]:
        cfg = self.cfg
        exempt = resolve_exempt(model, cfg.exempt_layers)
        resolved = cfg.model_dump(mode="json")
        resolved["exempt_layers"] = sorted(exempt)
        report = PruneReport(
            strategy=Strategy.COMP.value,
            config=resolved,
            input_policy=cfg.input_policy,
            target_ratio=cfg.ratio,
            total_params=model.prunable_params,
        )
        try:
            pruned = self._run(model, corpus, exempt, report)
        except CompError as e:
            report.status = "partial"
            report.error = str(e)
            e.partial_report = report
            logger.error("Pruning run aborted", error=str(e), exc_info=True)
            raise
        return pruned, report

    def _check_feasible(self, model: TransformerModel, exempt: Set[int]) -> None:
        cfg = self.cfg
        removable = removable_layers(model, exempt)
        if cfg.removed_layers > len(removable):
            raise InfeasibleConfigError(
                f"cannot remove {cfg.removed_layers} layers, only {len(removable)} are not exempt",
                removed_layers=cfg.removed_layers,
            )
        if cfg.removed_layers:
            mean_layer = model.prunable_params / len(model.layers)
            if cfg.removed_layers * mean_layer > cfg.ratio * model.prunable_params * (1 + 1e-9):
                raise InfeasibleConfigError(
                    f"removing {cfg.removed_layers} layers overshoots ratio {cfg.ratio}: "
                    "lower the number of removed layers or raise the ratio",
                    removed_layers=cfg.removed_layers,
                    ratio=cfg.ratio,
                )

    def _run(self, model: TransformerModel, corpus: bytes, exempt: Set[int], report: PruneReport) -> TransformerModel:
        cfg = self.cfg
        phases = report.phase_seconds
        self._check_feasible(model, exempt)

        with metrics.phase("calibration", phases):
            calib, eval_tokens = calibration_batches(corpus, cfg)
            original_logits, original_trace = capture(model, calib)
            report.captures.append("original model: dense inputs and first layer-phase scores")

        with metrics.phase("layer", phases):
            current, history = layer_prune(
                copy.deepcopy(model), calib, cfg.removed_layers, exempt, cfg.layer_order,
                initial_trace=original_trace,
            )
            report.layer_history = history
            report.removed_layers = [h.removed for h in history]
            original_params = layer_param_counts(model)
            report.removed_params = sum(original_params[i] for i in report.removed_layers)
            if len(history) > 1 and cfg.layer_order == LayerOrder.ITERATIVE:
                report.captures.append(f"layer-pruned model: {len(history) - 1} re-scoring captures")

        with metrics.phase("allocate", phases):
            candidates = removable_layers(current, exempt)
            if history:
                _, current_trace = capture(current, calib)
                report.captures.append("layer-pruned model: allocation scores")
            else:
                current_trace = original_trace
            report.final_layer_scores = layer_scores(current_trace, candidates)
            params = layer_param_counts(current)
            capacities = {layer.index: layer.prunable_capacity(cfg.dense_cap) for layer in current.layers}
            report.plan = allocate_ratios(
                {s.layer: s.importance for s in report.final_layer_scores},
                cfg.ratio,
                report.total_params,
                report.removed_params,
                params,
                capacities,
            )
            if not candidates and report.plan.total_budget > 0:
                report.shortfall = True
                report.notes.append("no layer is left for neuron pruning")

        with metrics.phase("neuron", phases):
            for index in candidates:
                layer = current.layers[position_of(current, index)]
                if cfg.input_policy == InputPolicy.PROPAGATED:
                    _, source = capture(current, calib)
                    report.captures.append(f"propagated inputs before layer {index}")
                else:
                    source = original_trace
                outcome = prune_layer_neurons(layer, source, report.plan.budget_for(index), cfg)
                report.denses.extend(outcome.denses)
                if outcome.shortfall:
                    report.shortfall = True
                    report.notes.append(f"layer {index} hit the per-dense cap before its budget")

        with metrics.phase("evaluate", phases):
            report.calibration_kl_tuned = fidelity_from_logits(original_logits, forward(current, calib))[0]
            report.calibration_kl_untuned = fidelity_from_logits(
                original_logits, forward(strip_tuning(current), calib)
            )[0]
            pruned = fold_masks(current)
            evaluate_pruned(model, pruned, eval_tokens, report)
            finish_accounting(report, pruned, Strategy.COMP.value)

        if report.plan.total_budget == 0.0 and report.removed_layers:
            report.notes.append("ratio is covered by layer removal alone")
        logger.info(
            "Pruning run finished",
            removed_layers=report.removed_layers,
            achieved_ratio=report.achieved_ratio,
            perplexity_before=report.before.perplexity,
            perplexity_after=report.after.perplexity,
        )
        return pruned


def run_comp(model: TransformerModel, corpus: bytes, cfg: PruneConfig) -> Tuple[TransformerModel, PruneReport]:
    return PruneScheduler(cfg).run(model, corpus)
