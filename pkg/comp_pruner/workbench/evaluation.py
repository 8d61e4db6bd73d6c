from typing import Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import log_softmax, logsumexp

from ..utils import ModelError
from .transformer import TransformerModel, forward


def _sequences(tokens: ArrayLike) -> NDArray[np.int64]:
    batch = np.asarray(tokens)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] < 2:
        raise ModelError(f"need sequences of at least 2 tokens, got shape {batch.shape}")
    return batch


def perplexity_from_logits(logits: ArrayLike, targets: ArrayLike) -> float:
    """exp of the mean of ``logsumexp(z) - z[target]`` over columns of a (vocab, T) logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    picked = logits[targets, np.arange(targets.size)]
    nll = logsumexp(logits, axis=0) - picked
    return float(np.exp(nll.mean()))


def perplexity(model: TransformerModel, tokens: ArrayLike) -> float:
    batch = _sequences(tokens)
    n, seq = batch.shape
    logits = forward(model, batch)  # (vocab, n*seq), batch-major
    keep = (np.arange(n * seq) % seq) != seq - 1
    targets = batch[:, 1:].reshape(-1)
    return perplexity_from_logits(logits[:, keep], targets)


def fidelity(model_a: TransformerModel, model_b: TransformerModel, tokens: ArrayLike) -> Tuple[float, float]:
    """(mean KL(p_a || p_b) over positions, mean squared logit difference)."""
    if model_a.config.vocab != model_b.config.vocab:
        raise ModelError(
            "models have different vocabularies",
            vocab_a=model_a.config.vocab,
            vocab_b=model_b.config.vocab,
        )
    batch = _sequences(tokens)
    return fidelity_from_logits(forward(model_a, batch), forward(model_b, batch))


def fidelity_from_logits(logits_a: ArrayLike, logits_b: ArrayLike) -> Tuple[float, float]:
    logits_a = np.asarray(logits_a, dtype=np.float64)
    logits_b = np.asarray(logits_b, dtype=np.float64)
    log_a = log_softmax(logits_a, axis=0)
    log_b = log_softmax(logits_b, axis=0)
    kl = (np.exp(log_a) * (log_a - log_b)).sum(axis=0)
    mse = float(np.mean((logits_a - logits_b) ** 2))
    return max(float(kl.mean()), 0.0), mse
