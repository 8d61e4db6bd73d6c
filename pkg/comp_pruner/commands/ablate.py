import argparse
from typing import Any, Dict, List, Optional

import numpy as np

from ..config import AblationKind
from ..models import AblationResult
from ..strategies import ablation_identical_input, ablation_layer_order
from ..utils import get_logger, CompError
from ..workbench import TransformerModel, load_checkpoint, read_corpus
from .base_command import BaseCommand, EXIT_OK, add_corpus_argument, add_prune_arguments, prune_config_from_args
from .prune import resolve_removed_layers
from .reporting import build_manifest, utc_now, write_csv, write_json, write_timings

logger = get_logger(__name__)

ABLATE_HEADER = ["kind", "seed", "metric", "a_name", "a", "b_name", "b", "identical_orders", "exit_code", "error"]
ABLATE_METRICS = ("perplexity", "kl", "logit_mse", "achieved_ratio")

PAIRS = {
    AblationKind.ITERATIVE_ORDER: ("iterative", "one-shot"),
    AblationKind.IDENTICAL_INPUT: ("identical", "propagated"),
}


def metric_value(result: AblationResult, name: str, metric: str) -> Optional[float]:
    after = result.reports[name].after
    if metric == "achieved_ratio":
        return result.reports[name].achieved_ratio
    return None if after is None else getattr(after, metric)


def paired_rows(kind: AblationKind, seed: int, result: Optional[AblationResult],
                error: Optional[CompError] = None) -> List[Dict[str, Any]]:
    a_name, b_name = PAIRS[kind]
    base = {"kind": kind.value, "seed": seed, "a_name": a_name, "b_name": b_name}
    if error is not None:
        return [dict(base, metric="", exit_code=error.exit_code, error=str(error))]
    return [
        dict(
            base,
            metric=metric,
            a=metric_value(result, a_name, metric),
            b=metric_value(result, b_name, metric),
            identical_orders="" if result.identical_orders is None else result.identical_orders,
            exit_code=0,
            error="",
        )
        for metric in ABLATE_METRICS
    ]


def mean_rows(kind: AblationKind, rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    a_name, b_name = PAIRS[kind]
    out = []
    for metric in ABLATE_METRICS:
        ok = [r for r in rows if r["metric"] == metric and r["a"] is not None and r["b"] is not None]
        if not ok:
            continue
        out.append({
            "kind": kind.value, "seed": "mean", "metric": metric,
            "a_name": a_name, "a": float(np.mean([r["a"] for r in ok])),
            "b_name": b_name, "b": float(np.mean([r["b"] for r in ok])),
            "exit_code": 0, "error": "",
        })
    return out


class AblateCommand(BaseCommand):
    name = "ablate"
    help = "paired ablation: iterative vs one-shot layer order, or identical vs propagated inputs"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--which", choices=[k.value for k in AblationKind], required=True)
        parser.add_argument("--model", required=True, help="checkpoint directory")
        add_corpus_argument(parser)
        parser.add_argument("--ratio", type=float, default=0.3)
        parser.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
        add_prune_arguments(parser)
        parser.add_argument("--out", required=True, help="two-column comparison CSV")
        parser.add_argument("--report", default=None, help="JSON with every ablation result (default: <out>.json)")

    def run(self, args: argparse.Namespace) -> int:
        started = utc_now()
        kind = AblationKind(args.which)
        model = load_checkpoint(args.model)
        corpus = read_corpus(args.corpus)

        rows: List[Dict[str, Any]] = []
        results: List[Dict[str, Any]] = []
        phases: Dict[str, float] = {}
        inputs = {"model": args.model, "corpus": args.corpus}
        for seed in range(args.seed, args.seed + args.seeds):
            try:
                result = self._run_seed(kind, model, corpus, args, seed)
            except CompError as e:
                logger.warning("Ablation seed failed", kind=kind.value, seed=seed, error=str(e))
                rows.extend(paired_rows(kind, seed, None, e))
                continue
            config = {name: report.config for name, report in result.reports.items()}
            result.manifest = build_manifest(self.name, dict(config, which=kind.value), inputs, seed)
            for name, report in result.reports.items():
                report.manifest = build_manifest(self.name, report.config, inputs, seed)
                for phase, seconds in report.phase_seconds.items():
                    key = f"{name}.{phase}"
                    phases[key] = phases.get(key, 0.0) + seconds
            rows.extend(paired_rows(kind, seed, result))
            results.append(result.model_dump(mode="json"))

        write_csv(args.out, ABLATE_HEADER, rows + mean_rows(kind, rows))
        report_path = args.report or f"{args.out}.json"
        write_json(report_path, {"kind": kind.value, "results": results})
        write_timings(report_path, started, phases)
        print(f"kind={kind.value} seeds={args.seeds} succeeded={len(results)}")
        return EXIT_OK

    def _run_seed(self, kind: AblationKind, model: TransformerModel, corpus: bytes,
                  args: argparse.Namespace, seed: int) -> AblationResult:
        cfg = prune_config_from_args(
            args, ratio=args.ratio, seed=seed,
            removed_layers=resolve_removed_layers(args, model, args.ratio),
        )
        if kind == AblationKind.ITERATIVE_ORDER:
            return ablation_layer_order(model, corpus, cfg)
        return ablation_identical_input(model, corpus, cfg)
