"""Desk-scale decoder transformer whose denses honor pruning masks.

Parameters are stored in float32 (the checkpoint dtype); forward passes run in
``model.compute_dtype``, float64 unless the trainer switches it. Every dense
computes ``W (m_hat * x) + b``, so a mask edit is visible to the next forward
without touching weights until ``fold_masks``.
"""

import copy
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from numpy.typing import ArrayLike, NDArray

from ..config import FfnKind
from ..models import ModelConfig
from ..utils import get_logger, ModelError
from .trace import ActivationTrace

logger = get_logger(__name__)

ATTENTION_DENSES = ("q_proj", "k_proj", "v_proj", "o_proj")
GATED_DENSES = ATTENTION_DENSES + ("gate_proj", "up_proj", "down_proj")
PLAIN_DENSES = ATTENTION_DENSES + ("up_proj", "down_proj")


def dense_names(ffn_kind: FfnKind) -> Tuple[str, ...]:
    return GATED_DENSES if ffn_kind == FfnKind.GATED else PLAIN_DENSES


class DenseLayer(nn.Module):
    def __init__(self, name: str, in_features: int, out_features: int):
        super().__init__()
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.zeros(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.register_buffer("binary_mask", torch.ones(in_features, dtype=torch.float64))
        self.register_buffer("tuned_mask", torch.ones(in_features, dtype=torch.float64))
        self.masked = True

    @classmethod
    def from_arrays(cls, name: str, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> "DenseLayer":
        weight = np.asarray(weight, dtype=np.float32)
        dense = cls(name, weight.shape[1], weight.shape[0])
        with torch.no_grad():
            dense.weight.copy_(torch.from_numpy(weight))
            if bias is not None:
                dense.bias.copy_(torch.from_numpy(np.asarray(bias, dtype=np.float32)))
        return dense

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.masked:
            x = x * self.tuned_mask.to(x.dtype)
        return F.linear(x, self.weight.to(x.dtype), self.bias.to(x.dtype))

    def weight_matrix(self) -> NDArray[np.float64]:
        return self.weight.detach().to(torch.float64).numpy().copy()

    def mask_arrays(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        return self.binary_mask.numpy().copy(), self.tuned_mask.numpy().copy()

    def set_masks(self, binary: ArrayLike, tuned: Optional[ArrayLike] = None) -> None:
        binary = np.asarray(binary, dtype=np.float64)
        tuned = binary.copy() if tuned is None else np.asarray(tuned, dtype=np.float64)
        if binary.shape != (self.in_features,) or tuned.shape != (self.in_features,):
            raise ModelError(f"mask shape does not match {self.name} in_features={self.in_features}")
        if not np.all((binary == 0.0) | (binary == 1.0)):
            raise ModelError(f"binary mask of {self.name} must be 0/1")
        if not np.all(np.isfinite(tuned)):
            raise ModelError(f"tuned mask of {self.name} has non-finite entries")
        tuned = np.where(binary == 0.0, 0.0, tuned)
        self.binary_mask.copy_(torch.from_numpy(binary))
        self.tuned_mask.copy_(torch.from_numpy(tuned))

    @property
    def pruned_count(self) -> int:
        return int((self.binary_mask == 0).sum().item())

    @property
    def pruned_params(self) -> int:
        return self.out_features * self.pruned_count

    @property
    def param_count(self) -> int:
        return self.out_features * self.in_features + self.out_features


class LayerNorm(nn.Module):
    """Classic LayerNorm with scale and shift, evaluated in the input dtype."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(
            x, (x.shape[-1],), self.scale.to(x.dtype), self.shift.to(x.dtype), self.eps
        )


Capture = Dict[str, torch.Tensor]


class TransformerLayer(nn.Module):
    def __init__(self, index: int, config: ModelConfig):
        super().__init__()
        self.index = index
        self.n_heads = config.n_heads
        self.ffn_kind = config.ffn_kind
        d, f = config.d_model, config.d_ff
        self.ln1 = LayerNorm(d, config.norm_eps)
        self.ln2 = LayerNorm(d, config.norm_eps)
        shapes = {
            "q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d),
            "gate_proj": (d, f), "up_proj": (d, f), "down_proj": (f, d),
        }
        self.denses = nn.ModuleDict({
            name: DenseLayer(name, *shapes[name]) for name in dense_names(config.ffn_kind)
        })

    def forward(self, x: torch.Tensor, capture: Optional[Capture] = None) -> torch.Tensor:
        batch, seq, d = x.shape
        heads, head_dim = self.n_heads, d // self.n_heads

        h = self.ln1(x)
        q = self.denses["q_proj"](h)
        k = self.denses["k_proj"](h)
        v = self.denses["v_proj"](h)

        def split(t):
            return t.view(batch, seq, heads, head_dim).transpose(1, 2)

        scores = split(q) @ split(k).transpose(-2, -1) / math.sqrt(head_dim)
        causal = torch.ones(seq, seq, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        attended = (torch.softmax(scores, dim=-1) @ split(v)).transpose(1, 2).reshape(batch, seq, d)
        x = x + self.denses["o_proj"](attended)

        h2 = self.ln2(x)
        if self.ffn_kind == FfnKind.GATED:
            hidden = F.silu(self.denses["gate_proj"](h2)) * self.denses["up_proj"](h2)
        else:
            hidden = F.gelu(self.denses["up_proj"](h2))
        out = x + self.denses["down_proj"](hidden)

        if capture is not None:
            for name in ATTENTION_DENSES[:3]:
                capture[name] = h
            capture["o_proj"] = attended
            if self.ffn_kind == FfnKind.GATED:
                capture["gate_proj"] = h2
            capture["up_proj"] = h2
            capture["down_proj"] = hidden
        return out

    @property
    def param_count(self) -> int:
        """Prunable parameters N_l: dense weights and biases only."""
        return sum(dense.param_count for dense in self.denses.values())

    @property
    def pruned_params(self) -> int:
        return sum(dense.pruned_params for dense in self.denses.values())

    def prunable_capacity(self, cap: float) -> int:
        return sum(
            dense.out_features * int(math.floor(cap * dense.in_features))
            for dense in self.denses.values()
        )


class TransformerModel(nn.Module):
    def __init__(self, config: ModelConfig, layer_indices: Optional[Sequence[int]] = None):
        super().__init__()
        self.config = config
        self.compute_dtype = torch.float64
        indices = list(range(config.n_layers)) if layer_indices is None else list(layer_indices)
        self.token_embedding = nn.Parameter(torch.zeros(config.vocab, config.d_model))
        self.position_embedding = nn.Parameter(torch.zeros(config.max_seq, config.d_model))
        self.layers = nn.ModuleList([TransformerLayer(i, config) for i in indices])
        self.final_norm = LayerNorm(config.d_model, config.norm_eps)
        self.head_weight = nn.Parameter(torch.zeros(config.vocab, config.d_model))
        self.head_bias = nn.Parameter(torch.zeros(config.vocab))

    @property
    def layer_indices(self) -> List[int]:
        return [layer.index for layer in self.layers]

    def forward(self, tokens: torch.Tensor, captures: Optional[List[Capture]] = None) -> torch.Tensor:
        """(B, T) token ids -> (B, T, vocab) logits in ``compute_dtype``."""
        dtype = self.compute_dtype
        seq = tokens.shape[1]
        x = self.token_embedding.to(dtype)[tokens] + self.position_embedding.to(dtype)[:seq]
        for layer in self.layers:
            capture = None
            if captures is not None:
                capture = {"input": x}
                captures.append(capture)
            x = layer(x, capture)
            if capture is not None:
                capture["output"] = x
        x = self.final_norm(x)
        return F.linear(x, self.head_weight.to(dtype), self.head_bias.to(dtype))

    def dense_layers(self):
        for layer in self.layers:
            for dense in layer.denses.values():
                yield layer, dense

    @property
    def prunable_params(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def set_masked(self, enabled: bool) -> None:
        for _, dense in self.dense_layers():
            dense.masked = enabled


def build_model(config: ModelConfig, seed: int = 0, init_std: float = 0.02) -> TransformerModel:
    model = TransformerModel(config)
    generator = torch.Generator().manual_seed(seed)
    residual_std = init_std / math.sqrt(2 * config.n_layers)
    with torch.no_grad():
        model.token_embedding.normal_(0.0, init_std, generator=generator)
        model.position_embedding.normal_(0.0, init_std, generator=generator)
        for _, dense in model.dense_layers():
            std = residual_std if dense.name in ("o_proj", "down_proj") else init_std
            dense.weight.normal_(0.0, std, generator=generator)
        model.head_weight.normal_(0.0, init_std, generator=generator)
    return model


def _as_batch(model: TransformerModel, tokens: ArrayLike) -> torch.Tensor:
    batch = np.asarray(tokens)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[0] == 0 or batch.shape[1] == 0:
        raise ModelError(f"expected a non-empty token sequence or batch, got shape {batch.shape}")
    if batch.shape[1] > model.config.max_seq:
        raise ModelError(
            f"sequence length {batch.shape[1]} exceeds max_seq {model.config.max_seq}",
            seq_len=int(batch.shape[1]),
        )
    if not np.issubdtype(batch.dtype, np.integer):
        raise ModelError(f"token ids must be integers, got {batch.dtype}")
    if batch.min() < 0 or batch.max() >= model.config.vocab:
        raise ModelError(
            f"token id out of range [0, {model.config.vocab})",
            min=int(batch.min()), max=int(batch.max()),
        )
    return torch.from_numpy(batch.astype(np.int64))


def _columns(t: torch.Tensor) -> NDArray[np.float64]:
    """(B, T, f) activations -> (f, B*T) matrix with batch-major token order."""
    return t.detach().reshape(-1, t.shape[-1]).to(torch.float64).numpy().T


def forward(model: TransformerModel, tokens: ArrayLike) -> NDArray[np.float64]:
    """Logits as a (vocab, T) matrix; T counts tokens over the whole batch."""
    batch = _as_batch(model, tokens)
    with torch.no_grad():
        logits = model(batch)
    return _columns(logits)


def forward_capture(model: TransformerModel, batch: ArrayLike) -> Tuple[NDArray[np.float64], ActivationTrace]:
    tokens = _as_batch(model, batch)
    captures: List[Capture] = []
    with torch.no_grad():
        logits = model(tokens, captures)

    trace = ActivationTrace(batch_shape=(int(tokens.shape[0]), int(tokens.shape[1])))
    for layer, capture in zip(model.layers, captures):
        trace.layer_order.append(layer.index)
        trace.layer_inputs[layer.index] = _columns(capture["input"])
        trace.layer_outputs[layer.index] = _columns(capture["output"])
        for name in layer.denses:
            trace.dense_inputs[(layer.index, name)] = _columns(capture[name])
    trace.validate()
    return _columns(logits), trace


def replay_layer(layer: TransformerLayer, layer_input: ArrayLike, batch_shape: Tuple[int, int]) -> NDArray[np.float64]:
    """Re-run one layer on a captured (d_model, T) input; returns (d_model, T)."""
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(layer_input, dtype=np.float64).T))
    x = x.reshape(batch_shape[0], batch_shape[1], -1)
    with torch.no_grad():
        out = layer(x)
    return _columns(out)


def remove_layer(model: TransformerModel, position: int) -> TransformerModel:
    if not 0 <= position < len(model.layers):
        raise ModelError(
            f"layer position {position} out of range for {len(model.layers)} layers",
            position=position,
        )
    pruned = copy.deepcopy(model)
    removed = pruned.layers[position]
    del pruned.layers[position]
    logger.info(
        "Layer removed",
        layer=removed.index,
        position=position,
        params=removed.param_count,
        remaining=len(pruned.layers),
    )
    return pruned


def position_of(model: TransformerModel, layer_index: int) -> int:
    for position, layer in enumerate(model.layers):
        if layer.index == layer_index:
            return position
    raise ModelError(f"layer {layer_index} is not present", layer=layer_index)


def fold_masks(model: TransformerModel) -> TransformerModel:
    """Scale weight column j by m_hat[j] and reset the tuned mask to the binary mask."""
    folded = copy.deepcopy(model)
    with torch.no_grad():
        for _, dense in folded.dense_layers():
            scaled = dense.weight.to(torch.float64) * dense.tuned_mask.unsqueeze(0)
            dense.weight.copy_(scaled.to(dense.weight.dtype))
            dense.tuned_mask.copy_(dense.binary_mask)
    return folded


def strip_tuning(model: TransformerModel) -> TransformerModel:
    """Same binary masks, tuned masks reset to them: the un-tuned pruned model."""
    stripped = copy.deepcopy(model)
    with torch.no_grad():
        for _, dense in stripped.dense_layers():
            dense.tuned_mask.copy_(dense.binary_mask)
    return stripped
