from .trace import ActivationTrace
from .transformer import (
    DenseLayer,
    LayerNorm,
    TransformerLayer,
    TransformerModel,
    build_model,
    dense_names,
    fold_masks,
    forward,
    forward_capture,
    position_of,
    remove_layer,
    replay_layer,
    strip_tuning,
)
from .checkpoint import save_checkpoint, load_checkpoint, checkpoint_digest
from .tokenizer import byte_tokenize, read_corpus, sample_windows
from .trainer import train_toy
from .evaluation import perplexity, perplexity_from_logits, fidelity, fidelity_from_logits

__all__ = [
    "ActivationTrace",
    "DenseLayer",
    "LayerNorm",
    "TransformerLayer",
    "TransformerModel",
    "build_model",
    "dense_names",
    "fold_masks",
    "forward",
    "forward_capture",
    "position_of",
    "remove_layer",
    "replay_layer",
    "strip_tuning",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_digest",
    "byte_tokenize",
    "read_corpus",
    "sample_windows",
    "train_toy",
    "perplexity",
    "perplexity_from_logits",
    "fidelity",
    "fidelity_from_logits",
]
