from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from numpy.typing import NDArray

from ..utils import ModelError, NonFiniteError

DenseKey = Tuple[int, str]


@dataclass
class ActivationTrace:
    """Activations of one calibration forward pass.

    Keys are original layer indices, so a trace taken on a layer-pruned model
    still lines up with the layers it describes. Every matrix is
    features x tokens in float64, tokens ordered batch-major.
    """

    batch_shape: Tuple[int, int]
    layer_order: List[int] = field(default_factory=list)
    layer_inputs: Dict[int, NDArray[np.float64]] = field(default_factory=dict)
    layer_outputs: Dict[int, NDArray[np.float64]] = field(default_factory=dict)
    dense_inputs: Dict[DenseKey, NDArray[np.float64]] = field(default_factory=dict)

    @property
    def token_count(self) -> int:
        return self.batch_shape[0] * self.batch_shape[1]

    def dense_input(self, layer: int, dense: str) -> NDArray[np.float64]:
        try:
            return self.dense_inputs[(layer, dense)]
        except KeyError:
            raise ModelError(f"trace has no input for layer {layer} dense {dense}", layer=layer, dense=dense)

    def dense_mean(self, layer: int, dense: str) -> NDArray[np.float64]:
        """Token-mean input vector x_bar of one dense."""
        return self.dense_input(layer, dense).mean(axis=1)

    def layer_pair(self, layer: int) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        if layer not in self.layer_inputs:
            raise ModelError(f"trace has no activations for layer {layer}", layer=layer)
        return self.layer_inputs[layer], self.layer_outputs[layer]

    def validate(self) -> None:
        tokens = self.token_count
        matrices = [(f"layer {k} input", v) for k, v in self.layer_inputs.items()]
        matrices += [(f"layer {k} output", v) for k, v in self.layer_outputs.items()]
        matrices += [(f"layer {k[0]} {k[1]} input", v) for k, v in self.dense_inputs.items()]
        for name, matrix in matrices:
            if matrix.shape[1] != tokens:
                raise ModelError(f"{name} has {matrix.shape[1]} tokens, expected {tokens}")
            if not np.all(np.isfinite(matrix)):
                raise NonFiniteError(f"{name} has non-finite activations")
