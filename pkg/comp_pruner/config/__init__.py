from .settings import (
    settings,
    AblationKind,
    FfnKind,
    InputPolicy,
    LayerOrder,
    LogFormat,
    SolverKind,
    Strategy,
)

__all__ = [
    "settings",
    "AblationKind",
    "FfnKind",
    "InputPolicy",
    "LayerOrder",
    "LogFormat",
    "SolverKind",
    "Strategy",
]
