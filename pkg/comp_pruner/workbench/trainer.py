import math
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F

from ..models import ModelConfig, TrainConfig, TrainingHistory, TrainingPoint
from ..utils import get_logger, InputOutputError, TrainingDivergedError
from .tokenizer import sample_windows
from .transformer import TransformerModel, build_model

logger = get_logger(__name__)

HELDOUT_BATCHES = 4
WARMUP_STEPS = 100


def _loss(model: TransformerModel, batch: torch.Tensor) -> torch.Tensor:
    logits = model(batch[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))


def _lr_factor(step: int, total: int) -> float:
    if step < WARMUP_STEPS:
        return (step + 1) / WARMUP_STEPS
    progress = (step - WARMUP_STEPS) / max(1, total - WARMUP_STEPS)
    return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def train_toy(model_config: ModelConfig, corpus: bytes, train_config: TrainConfig) -> Tuple[TransformerModel, TrainingHistory]:
    """Next-byte training with AdamW; returns the model in float64 compute mode."""
    if len(corpus) < train_config.min_corpus_bytes:
        raise InputOutputError(
            f"corpus too small for training: {len(corpus)} bytes, need {train_config.min_corpus_bytes}",
            corpus_bytes=len(corpus),
        )
    # windows carry one extra byte for the shifted targets
    window = min(train_config.seq_len, model_config.max_seq) + 1
    split = int(len(corpus) * (1.0 - train_config.heldout_fraction))
    train_data, heldout_data = corpus[:split], corpus[split:]
    if len(heldout_data) < window:
        raise InputOutputError("held-out slice is shorter than one training window", heldout_bytes=len(heldout_data))

    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    heldout_rng = np.random.default_rng(train_config.seed + 1)
    heldout = [
        torch.from_numpy(sample_windows(heldout_data, window, train_config.batch_size, heldout_rng))
        for _ in range(HELDOUT_BATCHES)
    ]

    model = build_model(model_config, seed=train_config.seed)
    model.compute_dtype = torch.float32
    model.set_masked(False)
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr, weight_decay=0.01)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: _lr_factor(step, train_config.steps))

    def heldout_loss() -> float:
        model.eval()
        with torch.no_grad():
            value = float(np.mean([_loss(model, batch).item() for batch in heldout]))
        model.train()
        return value

    logger.info(
        "Training started",
        steps=train_config.steps,
        lr=train_config.lr,
        seed=train_config.seed,
        corpus_bytes=len(corpus),
    )

    points = []
    model.train()
    for step in range(1, train_config.steps + 1):
        batch = torch.from_numpy(sample_windows(train_data, window, train_config.batch_size, rng))
        loss = _loss(model, batch)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"training loss is not finite at step {step}", step=step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        optimizer.step()
        scheduler.step()

        if step % train_config.eval_every == 0 or step == train_config.steps:
            point = TrainingPoint(step=step, train_loss=float(loss.item()), heldout_loss=heldout_loss())
            if not math.isfinite(point.heldout_loss):
                raise TrainingDivergedError(f"held-out loss is not finite at step {step}", step=step)
            points.append(point)
            logger.info("Training progress", step=step, train_loss=point.train_loss, heldout_loss=point.heldout_loss)

    model.eval()
    model.compute_dtype = torch.float64
    model.set_masked(True)
    final = points[-1].heldout_loss
    history = TrainingHistory(points=points, final_heldout_loss=final, bits_per_byte=final / math.log(2))
    logger.info("Training finished", heldout_loss=final, bits_per_byte=history.bits_per_byte)
    return model, history
