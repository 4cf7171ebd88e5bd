"""Python module with the named, ordered collection of a model's trainable tensors and buffers."""
from collections import OrderedDict
from typing import Dict, Iterator, Mapping, Tuple

import numpy as np

from autodiff.tensor import Parameter, Tensor
from utilities.exceptions import CheckpointError


class ParameterStore:
    """
    Ordered name -> Parameter mapping plus the non-trainable buffers (BN running statistics).

    Names are slash-separated paths such as ``cnnfe1/stage0/conv/kernel``.
    """

    def __init__(self, parameters: Mapping[str, Parameter], buffers: Mapping[str, Tensor]):
        self.parameters: "OrderedDict[str, Parameter]" = OrderedDict(parameters)
        self.buffers: "OrderedDict[str, Tensor]" = OrderedDict(buffers)
        clash = set(self.parameters) & set(self.buffers)
        if clash:
            raise ValueError(f"Names used by both parameters and buffers: {sorted(clash)}")

    def __iter__(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(self.parameters.items())

    def __len__(self) -> int:
        return len(self.parameters)

    def __getitem__(self, name: str) -> Parameter:
        return self.parameters[name]

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters.values())

    def zero_grad(self) -> None:
        for param in self.parameters.values():
            param.zero_grad()

    def cast(self, dtype) -> None:
        """Switch every parameter and buffer to ``dtype``."""
        for param in self.parameters.values():
            param.cast(dtype)
        for buffer in self.buffers.values():
            buffer.data = buffer.data.astype(dtype)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Copies of all parameter and buffer values, parameters first."""
        state = OrderedDict((name, param.data.copy()) for name, param in self.parameters.items())
        state.update((name, buffer.data.copy()) for name, buffer in self.buffers.items())
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """
        Copy values into the existing tensors.

        Raises:
            CheckpointError: If a name is missing, unexpected, or has another shape
        """
        expected: Dict[str, Tensor] = dict(self.parameters)
        expected.update(self.buffers)
        missing = [name for name in expected if name not in state]
        unexpected = [name for name in state if name not in expected]
        if missing or unexpected:
            raise CheckpointError(
                f"Checkpoint does not match the model: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, tensor in expected.items():
            values = np.asarray(state[name])
            if values.shape != tensor.shape:
                raise CheckpointError(f"Shape mismatch for '{name}': checkpoint {values.shape}, model {tensor.shape}")
        for name, tensor in expected.items():
            tensor.data[...] = state[name]
