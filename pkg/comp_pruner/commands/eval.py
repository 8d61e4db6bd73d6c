import argparse

import numpy as np

from ..config import settings
from ..models import EvalMetrics
from ..utils import get_logger, InputOutputError
from ..workbench import byte_tokenize, fidelity, load_checkpoint, perplexity, read_corpus
from .base_command import BaseCommand, EXIT_OK
from .reporting import build_manifest, dumps, write_json

logger = get_logger(__name__)


def text_sequences(text: bytes, seq_len: int) -> np.ndarray:
    """Consecutive non-overlapping windows; a short tail is dropped unless it is the only window."""
    if len(text) < 2:
        raise InputOutputError("evaluation text needs at least 2 bytes")
    data = np.frombuffer(text, dtype=np.uint8).astype(np.int64)
    if len(data) <= seq_len:
        return data[None, :]
    usable = len(data) // seq_len * seq_len
    return data[:usable].reshape(-1, seq_len)


class EvalCommand(BaseCommand):
    name = "eval"
    help = "perplexity of a checkpoint, and fidelity against a baseline"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--model", required=True, help="checkpoint directory")
        source = parser.add_mutually_exclusive_group()
        source.add_argument("--corpus", default=None, help="sample windows from this corpus")
        source.add_argument("--text", default=None, help="evaluate on this literal text")
        parser.add_argument("--baseline", default=None, help="checkpoint to compare against")
        parser.add_argument("--samples", type=int, default=16)
        parser.add_argument("--seq-len", type=int, default=128)
        parser.add_argument("--seed", type=int, default=1)
        parser.add_argument("--out", default=None, help="JSON output path")

    def run(self, args: argparse.Namespace) -> int:
        model = load_checkpoint(args.model)
        seq_len = min(args.seq_len, model.config.max_seq)
        if args.text is not None:
            tokens = text_sequences(args.text.encode("utf-8"), seq_len)
            corpus_path = None
        else:
            corpus_path = args.corpus or str(settings.default_corpus)
            tokens = byte_tokenize(read_corpus(corpus_path), seq_len, args.samples, args.seed)

        result = EvalMetrics(perplexity=perplexity(model, tokens))
        if args.baseline:
            baseline = load_checkpoint(args.baseline)
            result.kl, result.logit_mse = fidelity(baseline, model, tokens)

        config = {"samples": args.samples, "seq_len": seq_len, "seed": args.seed, "text": args.text}
        inputs = {"model": args.model, "baseline": args.baseline, "corpus": corpus_path}
        output = {
            "metrics": result.model_dump(mode="json"),
            "manifest": build_manifest(self.name, config, inputs, args.seed).model_dump(mode="json"),
        }
        print(dumps(result), end="")
        if args.out:
            write_json(args.out, output)
        return EXIT_OK
