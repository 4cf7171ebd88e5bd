"""Python module with the differentiable layer operations used by the extractors and the MoE.

Feature maps are NHWC; convolution kernels are kh×kw×Cin×Cout.
"""
from typing import Optional, Tuple

import numpy as np

from autodiff import ops
from autodiff.tensor import Tensor, record
from utilities.exceptions import ShapeError

ACTIVATIONS = ("relu", "softmax", "none")


def _same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """Return (pad_before, pad_after, output_size); the odd pad goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return _same_padding(size, kernel, stride)[2]
    if padding == "valid":
        if size < kernel:
            raise ShapeError(f"Input extent {size} is smaller than kernel {kernel} under valid padding")
        return (size - kernel) // stride + 1
    raise ValueError(f"Unknown padding '{padding}'")


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: Tuple[int, int] = (1, 1),
    padding: str = "same",
) -> Tensor:
    """
    2-D cross-correlation, Y(i,j) = sum_m sum_n X(i+m, j+n) K(m,n) summed over input channels.

    Implemented as one matrix product per kernel offset, which keeps memory at the
    size of the feature map instead of a full patch matrix.

    Args:
        x: Input of shape N×H×W×Cin
        kernel: Kernel of shape kh×kw×Cin×Cout
        bias: Optional bias of length Cout
        stride: Vertical and horizontal stride
        padding: "same" (zero padding, extra row/column at the bottom/right) or "valid"

    Returns:
        Output of shape N×H'×W'×Cout
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    sh, sw = stride
    if padding == "same":
        top, bottom, oh = _same_padding(h, kh, sh)
        left, right, ow = _same_padding(w, kw, sw)
    else:
        oh = conv_output_size(h, kh, sh, padding)
        ow = conv_output_size(w, kw, sw, padding)
        top = bottom = left = right = 0

    padded = x.data
    if top or bottom or left or right:
        padded = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    weights = kernel.data

    def window(i: int, j: int):
        return (
            slice(None),
            slice(i, i + sh * (oh - 1) + 1, sh),
            slice(j, j + sw * (ow - 1) + 1, sw),
            slice(None),
        )

    out = np.zeros((n, oh, ow, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += padded[window(i, j)] @ weights[i, j]
    if bias is not None:
        out += bias.data

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(grad):
        grad_padded = np.zeros_like(padded) if x.requires_grad else None
        grad_kernel = np.zeros_like(weights) if kernel.requires_grad else None
        flat_grad = grad.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                region = window(i, j)
                if grad_kernel is not None:
                    grad_kernel[i, j] = padded[region].reshape(-1, cin).T @ flat_grad
                if grad_padded is not None:
                    grad_padded[region] += grad @ weights[i, j].T
        grad_x = None if grad_padded is None else grad_padded[:, top:top + h, left:left + w, :]
        grads = [grad_x, grad_kernel]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 1, 2)))
        return grads

    return record("conv2d", inputs, Tensor(out), backward_fn)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype))

    def backward_fn(grad):
        return (grad * mask,)

    return record("relu", (x,), out, backward_fn)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.01,
    epsilon: float = 1e-3,
) -> Tensor:
    """
    Per-channel batch normalization over every axis but the last.

    In training mode the batch mean and population variance (divisor m) are used
    and the running statistics move towards them by ``momentum``. In inference
    mode the running statistics are used and nothing is updated.

    Args:
        x: Input with channels on the last axis
        gamma: Scale, one per channel
        beta: Shift, one per channel
        running_mean: Running mean buffer, updated in place in training mode
        running_var: Running variance buffer, updated in place in training mode
        training: Batch statistics (True) or running statistics (False)
        momentum: Weight of the current batch in the running update
        epsilon: Added to the variance before the square root

    Returns:
        Normalized, scaled and shifted tensor of the same shape
    """
    axes = tuple(range(x.ndim - 1))
    count = x.size // x.shape[-1]
    if training:
        if count < 2:
            raise ShapeError(f"batchnorm in training mode needs more than one value per channel, got {x.shape}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data

    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    normalized = (x.data - mean) * inv_std
    out = Tensor((gamma.data * normalized + beta.data).astype(x.dtype))

    def backward_fn(grad):
        grad_gamma = (grad * normalized).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_norm = grad * gamma.data
        if training:
            grad_x = inv_std / count * (
                count * grad_norm
                - grad_norm.sum(axis=axes)
                - normalized * (grad_norm * normalized).sum(axis=axes)
            )
        else:
            grad_x = grad_norm * inv_std
        return grad_x.astype(x.dtype), grad_gamma, grad_beta

    return record("batchnorm", (x, gamma, beta), out, backward_fn)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """
    Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    The gradient goes to the first maximal position of each window.
    """
    if window != stride:
        raise ValueError("maxpool2d supports non-overlapping windows only (window == stride)")
    n, h, w, c = x.shape
    if h < window or w < window:
        raise ShapeError(f"maxpool2d: spatial extent {h}x{w} is smaller than the {window}x{window} window")
    oh, ow = h // window, w // window
    cropped = x.data[:, :oh * window, :ow * window, :]
    windows = (
        cropped.reshape(n, oh, window, ow, window, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, oh, ow, c, window * window)
    )
    argmax = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0])

    def backward_fn(grad):
        grad_windows = np.zeros_like(windows)
        np.put_along_axis(grad_windows, argmax[..., None], grad[..., None], axis=-1)
        grad_cropped = (
            grad_windows.reshape(n, oh, ow, c, window, window)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, oh * window, ow * window, c)
        )
        grad_x = np.zeros_like(x.data)
        grad_x[:, :oh * window, :ow * window, :] = grad_cropped
        return (grad_x,)

    return record("maxpool2d", (x,), out, backward_fn)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean of each feature map: N×H×W×C -> N×C."""
    n, h, w, c = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)))

    def backward_fn(grad):
        return (np.broadcast_to(grad[:, None, None, :] / (h * w), x.shape).astype(x.dtype),)

    return record("global_average_pool", (x,), out, backward_fn)


def softmax(z: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with max subtraction."""
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)
    out = Tensor(probs)

    def backward_fn(grad):
        return (probs * (grad - (grad * probs).sum(axis=-1, keepdims=True)),)

    return record("softmax", (z,), out, backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor, activation: str = "none") -> Tensor:
    """y = f(x W + b) for an N×in input."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
    z = ops.bias_add(ops.matmul(x, weight), bias)
    if activation == "relu":
        return relu(z)
    if activation == "softmax":
        return softmax(z)
    if activation == "none":
        return z
    raise ValueError(f"Unknown activation '{activation}'; expected one of {ACTIVATIONS}")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """
    Inverted dropout: zero each value with probability ``rate`` and scale survivors by 1/(1-rate).

    Identity in inference mode or when ``rate`` is 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random source")
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.dtype) * scale
    out = Tensor(x.data * mask)

    def backward_fn(grad):
        return (grad * mask,)

    return record("dropout", (x,), out, backward_fn)


def flatten(x: Tensor) -> Tensor:
    """N×H×W×C -> N×(H·W·C), row-major."""
    return ops.reshape(x, (x.shape[0], -1))
