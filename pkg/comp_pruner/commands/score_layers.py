import argparse

from ..scheduler import capture, iterative_layer_prune, resolve_exempt
from ..services import layer_scores
from ..utils import get_logger
from ..workbench import byte_tokenize, load_checkpoint, read_corpus
from .base_command import BaseCommand, EXIT_OK, add_calibration_arguments, add_corpus_argument
from .reporting import write_csv

logger = get_logger(__name__)

SCORES_HEADER = ["iteration", "layer", "redundancy", "importance", "skipped_tokens", "removed"]


class ScoreLayersCommand(BaseCommand):
    name = "score-layers"
    help = "per-layer redundancy and importance, optionally along iterative removal"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--model", required=True, help="checkpoint directory")
        add_corpus_argument(parser)
        add_calibration_arguments(parser)
        parser.add_argument("--iterative", type=int, default=0, metavar="N",
                            help="score along N iterative removals instead of once")
        parser.add_argument("--exempt", type=int, nargs="*", default=None)
        parser.add_argument("--out", required=True, help="CSV path")

    def run(self, args: argparse.Namespace) -> int:
        model = load_checkpoint(args.model)
        calib = byte_tokenize(read_corpus(args.corpus), args.seq_len, args.samples, args.seed)

        rows = []
        if args.iterative > 0:
            exempt = resolve_exempt(model, args.exempt)
            _, history = iterative_layer_prune(model, calib, args.iterative, exempt)
            for step in history:
                for score in step.scores:
                    rows.append({
                        "iteration": step.iteration,
                        **score.model_dump(),
                        "removed": score.layer == step.removed,
                    })
        else:
            _, trace = capture(model, calib)
            for score in layer_scores(trace, model.layer_indices):
                rows.append({"iteration": 0, **score.model_dump(), "removed": False})

        write_csv(args.out, SCORES_HEADER, rows)
        logger.info("Layer scores written", rows=len(rows), path=args.out)
        return EXIT_OK
