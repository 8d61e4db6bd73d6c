from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class FfnKind(str, Enum):
    GATED = "gated"  # gate/up/down, K=7 denses per layer
    PLAIN = "plain"  # up/down, K=6 denses per layer


class SolverKind(str, Enum):
    DIRECT = "direct"        # Cholesky on the Hadamard normal equations, LSMR fallback
    ITERATIVE = "iterative"  # LSMR on the stacked token system


class Strategy(str, Enum):
    COMP = "comp"
    LAYER = "layer"
    NEURON = "neuron"
    HYBRID_UNIFORM = "hybrid-uniform"


class InputPolicy(str, Enum):
    IDENTICAL = "identical"    # dense inputs from the original model
    PROPAGATED = "propagated"  # dense inputs re-captured from the pruned model


class LayerOrder(str, Enum):
    ITERATIVE = "iterative"
    ONE_SHOT = "one-shot"


class AblationKind(str, Enum):
    ITERATIVE_ORDER = "iterative-order"
    IDENTICAL_INPUT = "identical-input"


class LogFormat(str, Enum):
    JSON = "json"
    CONSOLE = "console"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="COMP_", env_file=".env", extra="ignore")

    log_level: str = Field("INFO")
    log_format: LogFormat = Field(LogFormat.JSON)

    default_corpus: Path = Field(Path("data/corpus.txt"))
    jobs: int = Field(1, ge=1)

    # Eigenpairs inside the importance metric; linalg itself defaults to 10*dim
    eig_tol: float = Field(1e-10, gt=0)
    eig_max_iter: int = Field(50_000, ge=1)

    lsq_tol: float = Field(1e-10, gt=0)
    lsq_max_iter: Optional[int] = Field(None, ge=1)

    gap_tolerance: float = Field(1e-6, gt=0)
    fd_step: float = Field(1e-5, gt=0)

    metrics_textfile: Optional[Path] = Field(None)

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        """Reject levels the stdlib logging module does not know"""
        import logging
        if not isinstance(getattr(logging, v.upper(), None), int):
            raise ValueError(f"Unknown log level: {v}")
        return v.upper()


settings = Settings()
