import argparse
from abc import ABC, abstractmethod
from typing import Optional

from pydantic import ValidationError

from ..config import settings
from ..models import CalibrationSpec, PruneConfig
from ..utils import get_logger, CompError, InfeasibleConfigError

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_IO = 2
EXIT_UNEXPECTED = 1


class BaseCommand(ABC):
    name: str = ""
    help: str = ""

    def __init__(self):
        self.command_name = self.__class__.__name__

    @abstractmethod
    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    @abstractmethod
    def run(self, args: argparse.Namespace) -> int:
        pass

    def execute_with_error_handling(self, args: argparse.Namespace) -> int:
        try:
            logger.info("Starting command", command=self.name)
            code = self.run(args)
            logger.info("Command completed", command=self.name, exit_code=code)
            return code
        except CompError as e:
            logger.error(
                "Command failed",
                command=self.name,
                error=str(e),
                exit_code=e.exit_code,
                **{k: v for k, v in e.context.items() if isinstance(v, (str, int, float, bool))},
            )
            return e.exit_code
        except OSError as e:
            logger.error("Command failed with an I/O error", command=self.name, error=str(e))
            return EXIT_IO
        except Exception as e:
            logger.error("Command failed unexpectedly", command=self.name, error=str(e), exc_info=True)
            return EXIT_UNEXPECTED


def add_corpus_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", default=str(settings.default_corpus), help="raw byte corpus file")


def add_calibration_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--samples", type=int, default=10, help="calibration windows")
    parser.add_argument("--seq-len", type=int, default=128, help="tokens per calibration window")
    parser.add_argument("--seed", type=int, default=0)


def add_prune_arguments(parser: argparse.ArgumentParser) -> None:
    """Flags shared by prune, compare and ablate; destinations are PruneConfig fields."""
    parser.add_argument("--layers", type=int, default=None,
                        help="layers to remove (default: largest n with n * mean layer < r * N)")
    parser.add_argument("--epsilon", type=float, default=None)
    parser.add_argument("--var-step", type=float, default=1e-3)
    parser.add_argument("--neuron-step", type=int, default=None)
    parser.add_argument("--dense-cap", type=float, default=0.95)
    parser.add_argument("--exempt", type=int, nargs="*", default=None, help="original layer indices")
    parser.add_argument("--solver", choices=["direct", "iterative"], default="direct")
    parser.add_argument("--eval-samples", type=int, default=16)
    parser.add_argument("--input-policy", choices=["identical", "propagated"], default="identical")
    parser.add_argument("--layer-order", choices=["iterative", "one-shot"], default="iterative")
    parser.add_argument("--recompute-importance", action="store_true")
    add_calibration_arguments(parser)


def auto_removed_layers(ratio: float, n_layers: int, removable: int) -> int:
    """Largest n with n / L strictly below r, limited to the removable layers."""
    n = 0
    while n + 1 <= removable and (n + 1) < ratio * n_layers - 1e-9:
        n += 1
    return n


def prune_config_from_args(args: argparse.Namespace, *, ratio: Optional[float] = None,
                           seed: Optional[int] = None, removed_layers: Optional[int] = None) -> PruneConfig:
    try:
        return PruneConfig(
            ratio=args.ratio if ratio is None else ratio,
            removed_layers=removed_layers if removed_layers is not None else (args.layers or 0),
            epsilon=args.epsilon,
            var_step=args.var_step,
            neuron_step=args.neuron_step,
            exempt_layers=args.exempt,
            dense_cap=args.dense_cap,
            solver=args.solver,
            seed=args.seed if seed is None else seed,
            calibration=CalibrationSpec(n_samples=args.samples, seq_len=args.seq_len),
            eval_samples=args.eval_samples,
            input_policy=args.input_policy,
            layer_order=args.layer_order,
            recompute_importance=args.recompute_importance,
        )
    except ValidationError as e:
        first = e.errors()[0]
        raise InfeasibleConfigError(
            f"invalid pruning configuration: {'.'.join(str(p) for p in first['loc'])}: {first['msg']}",
        )
