import argparse
from typing import Dict, List, Optional

from ..utils import get_logger
from .ablate import AblateCommand
from .base_command import BaseCommand
from .compare import CompareCommand
from .eval import EvalCommand
from .prune import PruneCommand
from .score_layers import ScoreLayersCommand
from .train import TrainCommand

logger = get_logger(__name__)


class CommandFactory:
    def __init__(self):
        self._commands: Dict[str, BaseCommand] = {}
        for command in (
            TrainCommand(),
            ScoreLayersCommand(),
            PruneCommand(),
            EvalCommand(),
            CompareCommand(),
            AblateCommand(),
        ):
            self.register_command(command)

    def register_command(self, command: BaseCommand) -> None:
        self._commands[command.name] = command
        logger.debug("Command registered", command=command.name, handler=command.command_name)

    def get_command(self, name: str) -> Optional[BaseCommand]:
        command = self._commands.get(name)
        if command is None:
            logger.warning("No command registered", command=name, available=self.get_command_names())
        return command

    def get_command_names(self) -> List[str]:
        return list(self._commands.keys())

    def add_subparsers(self, parser: argparse.ArgumentParser) -> Dict[str, argparse.ArgumentParser]:
        subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
        parsers = {}
        for name, command in self._commands.items():
            sub = subparsers.add_parser(name, help=command.help, description=command.help)
            command.add_arguments(sub)
            parsers[name] = sub
        return parsers


command_factory = CommandFactory()
