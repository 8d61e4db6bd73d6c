from pydantic import BaseModel, Field, model_validator
from typing import List

from ..config import FfnKind


class ModelConfig(BaseModel):
    n_layers: int = Field(8, ge=4)  # first two + last exempt leaves a prunable layer
    d_model: int = Field(64, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(176, ge=1)
    vocab: int = Field(256, ge=2)
    max_seq: int = Field(128, ge=2)
    ffn_kind: FfnKind = FfnKind.GATED
    norm_eps: float = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def check_heads(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class TrainConfig(BaseModel):
    steps: int = Field(2000, ge=1)
    lr: float = Field(3e-3, gt=0)
    seed: int = 0
    batch_size: int = Field(16, ge=1)
    seq_len: int = Field(128, ge=2)
    heldout_fraction: float = Field(0.05, gt=0, lt=1)
    eval_every: int = Field(100, ge=1)
    min_corpus_bytes: int = Field(64 * 1024, ge=1)


class TrainingPoint(BaseModel):
    step: int
    train_loss: float
    heldout_loss: float


class TrainingHistory(BaseModel):
    points: List[TrainingPoint] = []
    final_heldout_loss: float
    bits_per_byte: float
