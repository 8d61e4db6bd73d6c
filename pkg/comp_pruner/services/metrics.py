from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, Optional, Union

import time
from prometheus_client import CollectorRegistry, Counter, Histogram, Gauge, write_to_textfile

registry = CollectorRegistry()

phase_duration_seconds = Histogram(
    'comp_phase_duration_seconds',
    'Time spent in each pruning phase',
    ['phase'],
    registry=registry,
)

layers_removed_total = Counter(
    'comp_layers_removed_total',
    'Total number of transformer layers removed',
    registry=registry,
)

neurons_pruned_total = Counter(
    'comp_neurons_pruned_total',
    'Total number of dense input neurons pruned',
    ['dense'],
    registry=registry,
)

mask_tunes_total = Counter(
    'comp_mask_tunes_total',
    'Total number of mask tuning solves',
    ['solver'],
    registry=registry,
)

fallbacks_total = Counter(
    'comp_fallbacks_total',
    'Total number of numerical fallbacks taken',
    ['kind'],
    registry=registry,
)

forward_passes_total = Counter(
    'comp_forward_passes_total',
    'Total number of calibration forward passes with activation capture',
    registry=registry,
)

achieved_ratio = Gauge(
    'comp_achieved_ratio',
    'Pruned fraction of prunable parameters in the last run',
    ['strategy'],
    registry=registry,
)


class MetricsCollector:
    @contextmanager
    def phase(self, name: str, sink: Optional[Dict[str, float]] = None) -> Iterator[None]:
        """Time a pipeline phase; elapsed seconds are also added to ``sink[name]``."""
        start = time.perf_counter()
        try:
            yield
        finally:
            duration = time.perf_counter() - start
            phase_duration_seconds.labels(phase=name).observe(duration)
            if sink is not None:
                sink[name] = sink.get(name, 0.0) + duration

    def record_layer_removed(self):
        layers_removed_total.inc()

    def record_neurons_pruned(self, dense: str, count: int):
        if count > 0:
            neurons_pruned_total.labels(dense=dense).inc(count)

    def record_mask_tune(self, solver: str):
        mask_tunes_total.labels(solver=solver).inc()

    def record_fallback(self, kind: str):
        """kind is ``gradient`` or ``solver``"""
        fallbacks_total.labels(kind=kind).inc()

    def record_forward_pass(self):
        forward_passes_total.inc()

    def set_achieved_ratio(self, strategy: str, ratio: float):
        achieved_ratio.labels(strategy=strategy).set(ratio)

    def write_textfile(self, path: Union[str, Path]):
        write_to_textfile(str(path), registry)


metrics = MetricsCollector()
