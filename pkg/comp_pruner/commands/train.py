import argparse
import json
from pathlib import Path

from pydantic import ValidationError

from ..models import ModelConfig, TrainConfig
from ..utils import get_logger, InputOutputError, ModelError, InfeasibleConfigError
from ..workbench import read_corpus, save_checkpoint, train_toy
from .base_command import BaseCommand, EXIT_OK, add_corpus_argument
from .reporting import build_manifest, utc_now, write_csv, write_json, write_timings

logger = get_logger(__name__)

CURVE_HEADER = ["step", "train_loss", "heldout_loss"]


def load_model_config(path) -> ModelConfig:
    if path is None:
        return ModelConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise InputOutputError(f"cannot read model config {path}: {e}", path=str(path))
    except json.JSONDecodeError as e:
        raise ModelError(f"model config {path} is not valid JSON: {e}", path=str(path))
    try:
        return ModelConfig.model_validate(data)
    except ValidationError as e:
        raise ModelError(f"invalid model config: {e.errors()[0]['msg']}", path=str(path))


class TrainCommand(BaseCommand):
    name = "train"
    help = "train the toy transformer on a byte corpus"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        add_corpus_argument(parser)
        parser.add_argument("--config", default=None, help="model config JSON (ModelConfig fields)")
        parser.add_argument("--steps", type=int, default=2000)
        parser.add_argument("--lr", type=float, default=3e-3)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--batch-size", type=int, default=16)
        parser.add_argument("--out", required=True, help="checkpoint directory")
        parser.add_argument("--curve", default=None, help="training curve CSV (default: <out>.curve.csv)")

    def run(self, args: argparse.Namespace) -> int:
        started = utc_now()
        model_config = load_model_config(args.config)
        try:
            train_config = TrainConfig(
                steps=args.steps, lr=args.lr, seed=args.seed,
                batch_size=args.batch_size, seq_len=model_config.max_seq,
            )
        except ValidationError as e:
            raise InfeasibleConfigError(f"invalid training configuration: {e.errors()[0]['msg']}")
        corpus = read_corpus(args.corpus)

        model, history = train_toy(model_config, corpus, train_config)

        out = save_checkpoint(model, args.out)
        curve = Path(args.curve) if args.curve else out.with_name(out.name + ".curve.csv")
        write_csv(curve, CURVE_HEADER, (p.model_dump() for p in history.points))

        config = {"model": model_config.model_dump(mode="json"), "train": train_config.model_dump(mode="json")}
        report = {
            "manifest": build_manifest(self.name, config, {"corpus": args.corpus}, args.seed).model_dump(mode="json"),
            "history": history.model_dump(mode="json"),
        }
        report_path = out.with_name(out.name + ".train.json")
        write_json(report_path, report)
        write_timings(report_path, started, {})
        print(f"heldout_loss={history.final_heldout_loss:.6f} bits_per_byte={history.bits_per_byte:.4f}")
        return EXIT_OK
