"""Python module with the layer classes (parameters + forward) the branches are built from."""
import math
from typing import Iterable, List, Optional, Tuple

import numpy as np

from autodiff import ops
from autodiff.tensor import Parameter, Tensor, get_default_dtype
from model import functional as F
from utilities.exceptions import ShapeError

Shape = Tuple[int, ...]

BN_MOMENTUM = 0.01
BN_EPSILON = 1e-3


def he_uniform(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(get_default_dtype())


def glorot_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(get_default_dtype())


class Layer:
    """Base class: a named forward function with optional parameters and buffers."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> List[Tuple[str, Parameter]]:
        return []

    def buffers(self) -> List[Tuple[str, Tensor]]:
        return []

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def describe(self) -> str:
        return self.kind

    def num_parameters(self) -> int:
        return sum(param.size for _, param in self.parameters())


class Conv2D(Layer):
    """Convolution with optional fused ReLU."""

    kind = "conv"

    def __init__(
        self,
        name: str,
        in_channels: int,
        filters: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: str = "same",
        activation: str = "relu",
        use_bias: bool = True,
    ):
        super().__init__(name)
        if kernel_size < 1 or filters < 1 or in_channels < 1:
            raise ValueError(f"{name}: kernel size, filters and channels must be >= 1")
        self.kernel_size = kernel_size
        self.filters = filters
        self.stride = stride
        self.padding = padding
        self.activation = activation
        fan_in = kernel_size * kernel_size * in_channels
        shape = (kernel_size, kernel_size, in_channels, filters)
        self.kernel = Parameter(he_uniform(rng, shape, fan_in), name=f"{name}/kernel")
        self.bias = Parameter(np.zeros(filters, dtype=get_default_dtype()), name=f"{name}/bias") if use_bias else None

    def __call__(self, x, training=False, rng=None):
        out = F.conv2d(x, self.kernel, self.bias, stride=(self.stride, self.stride), padding=self.padding)
        return F.relu(out) if self.activation == "relu" else out

    def parameters(self):
        params = [("kernel", self.kernel)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def output_shape(self, input_shape):
        n, h, w, _ = input_shape
        return (
            n,
            F.conv_output_size(h, self.kernel_size, self.stride, self.padding),
            F.conv_output_size(w, self.kernel_size, self.stride, self.padding),
            self.filters,
        )

    def describe(self):
        k = self.kernel_size
        stride = f", stride {self.stride}" if self.stride != 1 else ""
        act = ", relu" if self.activation == "relu" else ""
        return f"conv {k}x{k}, {self.filters} filters{stride}{act}"


class BatchNorm(Layer):
    """Batch normalization over the channel axis with running statistics."""

    kind = "batchnorm"

    def __init__(self, name: str, channels: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON):
        super().__init__(name)
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"{name}: momentum must be in (0, 1)")
        dtype = get_default_dtype()
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name=f"{name}/gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}/beta")
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype), name=f"{name}/running_mean")
        self.running_var = Tensor(np.ones(channels, dtype=dtype), name=f"{name}/running_var")

    def __call__(self, x, training=False, rng=None):
        return F.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, epsilon=self.epsilon,
        )

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name: str, rate: float):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"{name}: dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x, training=False, rng=None):
        return F.dropout(x, self.rate, training, rng)

    def describe(self):
        return f"dropout {self.rate:g}"


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x, training=False, rng=None):
        return F.relu(x)


class MaxPool2D(Layer):
    kind = "maxpool 2x2"

    def __call__(self, x, training=False, rng=None):
        return F.maxpool2d(x, 2, 2)

    def output_shape(self, input_shape):
        n, h, w, c = input_shape
        if h < 2 or w < 2:
            raise ShapeError(f"{self.name}: spatial extent {h}x{w} is smaller than the 2x2 window")
        return (n, h // 2, w // 2, c)


class GlobalAveragePool(Layer):
    kind = "global average pool"

    def __call__(self, x, training=False, rng=None):
        return F.global_average_pool(x)

    def output_shape(self, input_shape):
        return (input_shape[0], input_shape[-1])


class Flatten(Layer):
    kind = "flatten"

    def __call__(self, x, training=False, rng=None):
        return F.flatten(x)

    def output_shape(self, input_shape):
        return (input_shape[0], int(np.prod(input_shape[1:])))


class Dense(Layer):
    """Fully connected layer, y = f(xW + b)."""

    kind = "dense"

    def __init__(
        self,
        name: str,
        in_features: int,
        units: int,
        rng: np.random.Generator,
        activation: str = "relu",
        init: Optional[str] = None,
    ):
        super().__init__(name)
        if activation not in F.ACTIVATIONS:
            raise ValueError(f"{name}: unknown activation '{activation}'")
        self.in_features = in_features
        self.units = units
        self.activation = activation
        # He for ReLU layers, Glorot otherwise (softmax head, gate, linear input layer).
        init = init or ("he" if activation == "relu" else "glorot")
        shape = (in_features, units)
        if init == "he":
            weight = he_uniform(rng, shape, in_features)
        else:
            weight = glorot_uniform(rng, shape, in_features, units)
        self.weight = Parameter(weight, name=f"{name}/weight")
        self.bias = Parameter(np.zeros(units, dtype=get_default_dtype()), name=f"{name}/bias")

    def __call__(self, x, training=False, rng=None):
        return F.dense(x, self.weight, self.bias, self.activation)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def output_shape(self, input_shape):
        return (input_shape[0], self.units)

    def describe(self):
        act = "" if self.activation == "none" else f", {self.activation}"
        return f"dense {self.units}{act}"


class Sequential(Layer):
    """Ordered container; child parameters are exposed as ``child/param``."""

    kind = "sequential"

    def __init__(self, name: str, layers: Iterable[Layer]):
        super().__init__(name)
        self.layers = list(layers)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"{name}: duplicate layer names {names}")

    def __call__(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer(x, training=training, rng=rng)
        return x

    def parameters(self):
        return [(f"{layer.name}/{pname}", p) for layer in self.layers for pname, p in layer.parameters()]

    def buffers(self):
        return [(f"{layer.name}/{bname}", b) for layer in self.layers for bname, b in layer.buffers()]

    def output_shape(self, input_shape):
        for layer in self.layers:
            input_shape = layer.output_shape(input_shape)
        return input_shape

    def summary_rows(self, input_shape: Shape, prefix: str = "") -> List[Tuple[str, str, Shape, int]]:
        """(name, description, output shape, parameter count) for each leaf layer."""
        rows = []
        for layer in self.layers:
            path = f"{prefix}{layer.name}"
            if isinstance(layer, (Sequential, ResidualBlock)):
                rows.extend(layer.summary_rows(input_shape, prefix=f"{path}/"))
            else:
                rows.append((path, layer.describe(), layer.output_shape(input_shape), layer.num_parameters()))
            input_shape = layer.output_shape(input_shape)
        return rows


class ResidualBlock(Layer):
    """
    Pre-activation residual block: (BN, ReLU, conv3x3) twice plus a shortcut.

    The shortcut is the identity when shapes agree and a strided 1×1 projection
    otherwise. ``use_shortcut`` can be switched off to ablate the skip path.
    """

    kind = "residual block"

    def __init__(self, name: str, in_channels: int, filters: int, stride: int, rng: np.random.Generator):
        super().__init__(name)
        self.use_shortcut = True
        self.stride = stride
        self.filters = filters
        self.residual = Sequential(name, [
            BatchNorm("bn1", in_channels),
            ReLU("relu1"),
            Conv2D("conv1", in_channels, filters, 3, rng, stride=stride, activation="none"),
            BatchNorm("bn2", filters),
            ReLU("relu2"),
            Conv2D("conv2", filters, filters, 3, rng, activation="none"),
        ])
        self.projection = None
        if stride != 1 or in_channels != filters:
            self.projection = Conv2D("projection", in_channels, filters, 1, rng, stride=stride, activation="none")

    def shortcut(self, x: Tensor) -> Tensor:
        return x if self.projection is None else self.projection(x)

    def __call__(self, x, training=False, rng=None):
        out = self.residual(x, training=training, rng=rng)
        if self.use_shortcut:
            out = ops.add(out, self.shortcut(x))
        return out

    def parameters(self):
        params = self.residual.parameters()
        if self.projection is not None:
            params += [(f"projection/{pname}", p) for pname, p in self.projection.parameters()]
        return params

    def buffers(self):
        return self.residual.buffers()

    def output_shape(self, input_shape):
        return self.residual.output_shape(input_shape)

    def summary_rows(self, input_shape: Shape, prefix: str = "") -> List[Tuple[str, str, Shape, int]]:
        rows = self.residual.summary_rows(input_shape, prefix=prefix)
        if self.projection is not None:
            rows.append((
                f"{prefix}projection", self.projection.describe(),
                self.projection.output_shape(input_shape), self.projection.num_parameters(),
            ))
        return rows
