from .base_command import BaseCommand, EXIT_OK, EXIT_IO, EXIT_UNEXPECTED
from .factory import CommandFactory, command_factory

__all__ = [
    "BaseCommand",
    "EXIT_OK",
    "EXIT_IO",
    "EXIT_UNEXPECTED",
    "CommandFactory",
    "command_factory",
]
