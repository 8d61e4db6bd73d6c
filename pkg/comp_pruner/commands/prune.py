import argparse
from pathlib import Path

from ..config import Strategy
from ..models import PruneReport
from ..scheduler import removable_layers, resolve_exempt
from ..strategies import run_strategy
from ..utils import get_logger, CompError
from ..workbench import TransformerModel, load_checkpoint, read_corpus, save_checkpoint
from .base_command import (
    BaseCommand,
    EXIT_OK,
    add_corpus_argument,
    add_prune_arguments,
    auto_removed_layers,
    prune_config_from_args,
)
from .reporting import build_manifest, utc_now, write_csv, write_json, write_timings

logger = get_logger(__name__)

DENSE_HEADER = [
    "layer", "dense", "in_features", "out_features", "pruned", "pruned_params", "cap_hit",
    "variance_threshold", "variance", "reconstruction_rms", "kappa",
    "gradient_fallback", "solver_fallback", "solver_iterations",
]


def resolve_removed_layers(args: argparse.Namespace, model: TransformerModel, ratio: float) -> int:
    if args.layers is not None:
        return args.layers
    exempt = resolve_exempt(model, args.exempt)
    return auto_removed_layers(ratio, len(model.layers), len(removable_layers(model, exempt)))


class PruneCommand(BaseCommand):
    name = "prune"
    help = "prune a checkpoint with COMP or a baseline strategy"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--model", required=True, help="checkpoint directory")
        add_corpus_argument(parser)
        parser.add_argument("--ratio", type=float, default=0.2)
        parser.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.COMP.value)
        add_prune_arguments(parser)
        parser.add_argument("--out", required=True, help="pruned checkpoint directory")
        parser.add_argument("--report", required=True, help="JSON report path")
        parser.add_argument("--dense-csv", default=None, help="per-dense CSV (default: <report>.denses.csv)")

    def run(self, args: argparse.Namespace) -> int:
        started = utc_now()
        model = load_checkpoint(args.model)
        corpus = read_corpus(args.corpus)
        cfg = prune_config_from_args(args, removed_layers=resolve_removed_layers(args, model, args.ratio))
        strategy = Strategy(args.strategy)

        report_path = Path(args.report)
        dense_csv = Path(args.dense_csv) if args.dense_csv else report_path.with_name(report_path.name + ".denses.csv")
        config = dict(cfg.model_dump(mode="json"), strategy=strategy.value)
        manifest = build_manifest(self.name, config, {"model": args.model, "corpus": args.corpus}, cfg.seed)

        try:
            pruned, report = run_strategy(strategy, model, corpus, cfg)
        except CompError as e:
            if e.partial_report is not None:
                e.partial_report.manifest = manifest
                self._write(e.partial_report, report_path, dense_csv, started)
            raise

        report.manifest = manifest
        save_checkpoint(pruned, args.out)
        self._write(report, report_path, dense_csv, started)
        print(
            f"strategy={strategy.value} achieved_ratio={report.achieved_ratio:.4f} "
            f"perplexity={report.after.perplexity:.4f} kl={report.after.kl:.6f}"
        )
        return EXIT_OK

    def _write(self, report: PruneReport, report_path: Path, dense_csv: Path, started: str) -> None:
        write_json(report_path, report)
        write_timings(report_path, started, report.phase_seconds)
        write_csv(dense_csv, DENSE_HEADER, (d.model_dump() for d in report.denses))
