import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from . import __version__
from .commands import command_factory
from .config import settings, LogFormat
from .services import metrics
from .utils import setup_logging, get_logger, CompError, InputOutputError, InfeasibleConfigError

logger = get_logger(__name__)


def add_global_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config-file", default=None,
                        help="JSON object whose keys are flag destinations of the chosen command")
    parser.add_argument("--log-level", type=str.upper, default=None,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
                        help=f"default: {settings.log_level}")
    parser.add_argument("--log-format", choices=[f.value for f in LogFormat], default=None)
    parser.add_argument("--metrics-out", default=None,
                        help="write Prometheus text exposition here after the command")


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="comp",
        description="Hybrid layer and neuron pruning on a toy byte-level transformer",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    add_global_arguments(parser)
    subparsers = command_factory.add_subparsers(parser)
    return parser, subparsers


def parse_globals(argv: Sequence[str]) -> Tuple[argparse.Namespace, List[str]]:
    """Global flags only; the rest is left for the full parser."""
    parser = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    add_global_arguments(parser)
    return parser.parse_known_args(argv)


def load_config_file(path: str) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise InputOutputError(f"cannot read config file {path}: {e}", path=path)
    except json.JSONDecodeError as e:
        raise InfeasibleConfigError(f"config file {path} is not valid JSON: {e}", path=path)
    if not isinstance(data, dict):
        raise InfeasibleConfigError(f"config file {path} must hold a JSON object", path=path)
    return data


def apply_config_file(subparser: argparse.ArgumentParser, values: Dict[str, Any]) -> List[str]:
    """Install file values as subcommand defaults; explicit flags still win. Returns unknown keys."""
    actions = {a.dest: a for a in subparser._actions if a.dest != "help"}
    known = {k: v for k, v in values.items() if k in actions}
    for dest in known:
        actions[dest].required = False
    subparser.set_defaults(**known)
    return sorted(set(values) - set(known))


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser, subparsers = build_parser()
    flags, rest = parse_globals(argv)
    if flags.config_file:
        values = load_config_file(flags.config_file)
        name = next((token for token in rest if token in subparsers), None)
        if name is not None:
            unknown = apply_config_file(subparsers[name], values)
            if unknown:
                logger.warning("Ignoring unknown config file keys", keys=unknown, command=name)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    flags, _ = parse_globals(argv)
    setup_logging(flags.log_level, LogFormat(flags.log_format) if flags.log_format else None)

    try:
        args = parse_args(argv)
    except CompError as e:
        logger.error("Invalid configuration", error=str(e), exit_code=e.exit_code)
        return e.exit_code

    command = command_factory.get_command(args.command)
    code = command.execute_with_error_handling(args)

    metrics_out = args.metrics_out or settings.metrics_textfile
    if metrics_out:
        try:
            metrics.write_textfile(metrics_out)
        except OSError as e:
            logger.error("Cannot write metrics textfile", path=str(metrics_out), error=str(e))
            code = code or 2
    return code


if __name__ == "__main__":
    sys.exit(main())
