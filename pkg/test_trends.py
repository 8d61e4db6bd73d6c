"""Multi-seed trends on a trained toy model; run with --run-slow."""

import numpy as np
import pytest

from comp_pruner.commands.base_command import auto_removed_layers
from comp_pruner.config import Strategy
from comp_pruner.models import CalibrationSpec, ModelConfig, PruneConfig, TrainConfig
from comp_pruner.strategies import ablation_identical_input, ablation_layer_order, run_strategy
from comp_pruner.workbench import train_toy

pytestmark = pytest.mark.slow

SEEDS = range(5)
RATIO = 0.30
N_LAYERS = 8
# first two and last layer are exempt
REMOVABLE = N_LAYERS - 3


@pytest.fixture(scope="module")
def trained(corpus):
    config = ModelConfig(n_layers=N_LAYERS, d_model=32, n_heads=4, d_ff=64, max_seq=32)
    model, history = train_toy(
        config, corpus, TrainConfig(steps=600, lr=3e-3, batch_size=16, seq_len=32, eval_every=200, seed=0),
    )
    assert history.final_heldout_loss < np.log(256)
    return model


def _cfg(seed, **overrides):
    values = dict(
        ratio=RATIO,
        removed_layers=auto_removed_layers(RATIO, N_LAYERS, REMOVABLE),
        seed=seed,
        calibration=CalibrationSpec(n_samples=8, seq_len=32),
        eval_samples=8,
    )
    values.update(overrides)
    return PruneConfig(**values)


def _mean_perplexity(reports):
    return float(np.mean([r.after.perplexity for r in reports]))


@pytest.fixture(scope="module")
def strategy_reports(trained, corpus):
    return {
        strategy: [run_strategy(strategy, trained, corpus, _cfg(s))[1] for s in SEEDS]
        for strategy in (Strategy.COMP, Strategy.LAYER, Strategy.NEURON)
    }


def test_hybrid_beats_layer_only(strategy_reports):
    assert _mean_perplexity(strategy_reports[Strategy.COMP]) < _mean_perplexity(strategy_reports[Strategy.LAYER])


def test_hybrid_beats_neuron_only(strategy_reports):
    assert _mean_perplexity(strategy_reports[Strategy.COMP]) < _mean_perplexity(strategy_reports[Strategy.NEURON])


def test_tuning_lowers_calibration_kl(strategy_reports):
    reports = strategy_reports[Strategy.COMP]
    tuned = np.mean([r.calibration_kl_tuned for r in reports])
    untuned = np.mean([r.calibration_kl_untuned for r in reports])
    assert tuned <= untuned


def test_identical_inputs_not_worse(trained, corpus):
    results = [ablation_identical_input(trained, corpus, _cfg(s)) for s in SEEDS]
    identical = _mean_perplexity([r.reports["identical"] for r in results])
    propagated = _mean_perplexity([r.reports["propagated"] for r in results])
    assert identical <= propagated


def test_iterative_order_not_worse(trained, corpus):
    results = [ablation_layer_order(trained, corpus, _cfg(s, ratio=0.6, removed_layers=4)) for s in SEEDS]
    iterative = _mean_perplexity([r.reports["iterative"] for r in results])
    one_shot = _mean_perplexity([r.reports["one-shot"] for r in results])
    assert iterative <= one_shot
