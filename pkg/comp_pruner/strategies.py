"""Single-granularity baselines and the paired ablation experiments."""

import copy
import math
from typing import Optional, Tuple

from .config import InputPolicy, LayerOrder, Strategy
from .models import AblationResult, PruneConfig, PruneReport
from .scheduler import (
    DensePruner,
    calibration_batches,
    capture,
    evaluate_pruned,
    finish_accounting,
    layer_prune,
    removable_layers,
    resolve_exempt,
    run_comp,
    layer_param_counts,
)
from .services import metrics
from .utils import get_logger, CompError, InfeasibleConfigError
from .workbench import TransformerModel, fold_masks

logger = get_logger(__name__)


def _report(strategy: Strategy, model: TransformerModel, cfg: PruneConfig, **resolved) -> PruneReport:
    config = cfg.model_dump(mode="json")
    config.update(resolved)
    return PruneReport(
        strategy=strategy.value,
        config=config,
        target_ratio=cfg.ratio,
        total_params=model.prunable_params,
    )


def _attach(e: CompError, report: PruneReport) -> None:
    report.status = "partial"
    report.error = str(e)
    e.partial_report = report


def strategy_layer_only(
    model: TransformerModel,
    corpus: bytes,
    cfg: PruneConfig,
    *,
    n: Optional[int] = None,
    order: Optional[LayerOrder] = None,
) -> Tuple[TransformerModel, PruneReport]:
    """Remove floor(r * N / mean N_l) layers by layer importance; no neuron phase."""
    exempt = resolve_exempt(model, cfg.exempt_layers)
    order = order or cfg.layer_order
    mean_layer = model.prunable_params / len(model.layers)
    wanted = int(math.floor(cfg.ratio * model.prunable_params / mean_layer + 1e-9)) if n is None else n
    removable = removable_layers(model, exempt)
    count = min(wanted, len(removable))
    report = _report(
        Strategy.LAYER, model, cfg,
        exempt_layers=sorted(exempt), removed_layers=count, layer_order=order.value,
    )
    phases = report.phase_seconds
    try:
        with metrics.phase("calibration", phases):
            calib, eval_tokens = calibration_batches(corpus, cfg)
        with metrics.phase("layer", phases):
            pruned, history = layer_prune(copy.deepcopy(model), calib, count, exempt, order)
        report.layer_history = history
        report.removed_layers = [h.removed for h in history]
        params = layer_param_counts(model)
        report.removed_params = sum(params[i] for i in report.removed_layers)
        if count == 0:
            report.notes.append("ratio is below the mass of one layer: no layer removed")
        if count < wanted:
            report.shortfall = True
            report.notes.append(f"only {count} of {wanted} layers are removable")
        with metrics.phase("evaluate", phases):
            evaluate_pruned(model, pruned, eval_tokens, report)
            if n is None:
                finish_accounting(report, pruned, Strategy.LAYER.value)
            else:
                report.achieved_ratio = report.removed_params / report.total_params
    except CompError as e:
        _attach(e, report)
        raise
    return pruned, report


def _uniform_neuron_phase(
    model: TransformerModel,
    corpus: bytes,
    cfg: PruneConfig,
    strategy: Strategy,
    fraction_for,
) -> Tuple[TransformerModel, PruneReport]:
    """Prune round(f * q) neurons from every dense of the given layers, one tune per dense."""
    report = _report(strategy, model, cfg)
    phases = report.phase_seconds
    try:
        with metrics.phase("calibration", phases):
            calib, eval_tokens = calibration_batches(corpus, cfg)
            _, trace = capture(model, calib)
        current, layers, fraction = fraction_for(copy.deepcopy(model), calib, trace, report)
        report.config["neuron_fraction"] = fraction
        with metrics.phase("neuron", phases):
            for index in layers:
                layer = next(l for l in current.layers if l.index == index)
                for name, dense in layer.denses.items():
                    q = dense.in_features
                    count = min(int(round(fraction * q)), int(math.floor(cfg.dense_cap * q)))
                    pruner = DensePruner(index, dense, trace.dense_input(index, name), cfg)
                    if count > 0:
                        pruner.grow(count)
                    report.denses.append(pruner.report())
        with metrics.phase("evaluate", phases):
            pruned = fold_masks(current)
            evaluate_pruned(model, pruned, eval_tokens, report)
            finish_accounting(report, pruned, strategy.value)
    except CompError as e:
        _attach(e, report)
        raise
    logger.info("Uniform neuron pruning finished", strategy=strategy.value, fraction=fraction)
    return pruned, report


def strategy_neuron_only(model: TransformerModel, corpus: bytes, cfg: PruneConfig) -> Tuple[TransformerModel, PruneReport]:
    """c = round(r * q) neurons from every dense of every layer; no layer removal, no variance loop."""

    def plan(current, calib, trace, report):
        return current, current.layer_indices, cfg.ratio

    return _uniform_neuron_phase(model, corpus, cfg, Strategy.NEURON, plan)


def strategy_hybrid_uniform(model: TransformerModel, corpus: bytes, cfg: PruneConfig) -> Tuple[TransformerModel, PruneReport]:
    """Remove n layers, then the same neuron fraction from every dense of the remaining layers."""
    exempt = resolve_exempt(model, cfg.exempt_layers)

    def plan(current, calib, trace, report):
        current, history = layer_prune(current, calib, cfg.removed_layers, exempt, cfg.layer_order, initial_trace=trace)
        report.layer_history = history
        report.removed_layers = [h.removed for h in history]
        params = layer_param_counts(model)
        report.removed_params = sum(params[i] for i in report.removed_layers)
        budget = cfg.ratio * report.total_params - report.removed_params
        if budget < 0:
            raise InfeasibleConfigError(
                "removed layers already exceed the target ratio: lower the number of removed layers or raise the ratio",
            )
        weights = sum(d.out_features * d.in_features for _, d in current.dense_layers())
        return current, current.layer_indices, budget / weights

    if cfg.input_policy != InputPolicy.IDENTICAL:
        logger.warning("hybrid-uniform always tunes against the original model inputs")
    return _uniform_neuron_phase(model, corpus, cfg, Strategy.HYBRID_UNIFORM, plan)


def run_strategy(strategy: Strategy, model: TransformerModel, corpus: bytes, cfg: PruneConfig):
    if strategy == Strategy.COMP:
        return run_comp(model, corpus, cfg)
    if strategy == Strategy.LAYER:
        return strategy_layer_only(model, corpus, cfg)
    if strategy == Strategy.NEURON:
        return strategy_neuron_only(model, corpus, cfg)
    if strategy == Strategy.HYBRID_UNIFORM:
        return strategy_hybrid_uniform(model, corpus, cfg)
    raise InfeasibleConfigError(f"unknown strategy {strategy}")


def ablation_identical_input(model: TransformerModel, corpus: bytes, cfg: PruneConfig) -> AblationResult:
    """The same COMP run with dense inputs from the original model and from the pruned model."""
    reports = {}
    for policy in (InputPolicy.IDENTICAL, InputPolicy.PROPAGATED):
        _, report = run_comp(model, corpus, cfg.model_copy(update={"input_policy": policy}))
        reports[policy.value] = report
    return AblationResult(kind="identical-input", reports=reports)


def ablation_layer_order(model: TransformerModel, corpus: bytes, cfg: PruneConfig) -> AblationResult:
    """Remove ``cfg.removed_layers`` layers with iterative and with one-shot ranking."""
    reports = {}
    for order in (LayerOrder.ITERATIVE, LayerOrder.ONE_SHOT):
        _, report = strategy_layer_only(model, corpus, cfg, n=cfg.removed_layers, order=order)
        reports[order.value] = report
    same = reports["iterative"].removed_layers == reports["one-shot"].removed_layers
    if same:
        logger.info("Iterative and one-shot orders coincide", removed=reports["iterative"].removed_layers)
    return AblationResult(kind="iterative-order", reports=reports, identical_orders=same)
