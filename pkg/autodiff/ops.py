"""Python module with the basic differentiable tensor operations."""
from typing import Sequence, Tuple, Union

import numpy as np

from autodiff.tensor import Tensor, record
from utilities.exceptions import ShapeError

Operand = Union[Tensor, float, int, np.ndarray]


def _as_tensor(value: Operand, like: Tensor = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _coerce(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    # Only rank-0 operands broadcast.
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


def add(a: Operand, b: Operand) -> Tensor:
    """Elementwise sum; a rank-0 operand is added to every element."""
    a, b = _coerce(a, b)
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward_fn(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return record("add", (a, b), out, backward_fn)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _coerce(a, b)
    _check_elementwise(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward_fn(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return record("sub", (a, b), out, backward_fn)


def mul(a: Operand, b: Operand) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = _coerce(a, b)
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward_fn(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return record("mul", (a, b), out, backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of an M×K and a K×N tensor.

    Args:
        a: Left operand, rank 2
        b: Right operand, rank 2

    Returns:
        M×N tensor
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward_fn(grad):
        return grad @ b.data.T, a.data.T @ grad

    return record("matmul", (a, b), out, backward_fn)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias along the last axis."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias of shape {bias.shape} does not match last axis of {x.shape}")
    out = Tensor(x.data + bias.data)
    reduce_axes = tuple(range(x.ndim - 1))

    def backward_fn(grad):
        return grad, grad.sum(axis=reduce_axes)

    return record("bias_add", (x, bias), out, backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(tuple(shape)))

    def backward_fn(grad):
        return (grad.reshape(x.shape),)

    return record("reshape", (x,), out, backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """
    Concatenate tensors along ``axis``; all other extents must agree.

    Args:
        tensors: Two or more tensors of equal rank
        axis: Concatenation axis (last by default)

    Returns:
        Concatenated tensor
    """
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    rank = tensors[0].ndim
    axis = axis % rank
    for tensor in tensors[1:]:
        if tensor.ndim != rank or any(
            tensor.shape[d] != tensors[0].shape[d] for d in range(rank) if d != axis
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} differ outside axis {axis}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(grad):
        return tuple(np.split(grad, offsets, axis=axis))

    return record("concat", tensors, out, backward_fn)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all elements as a rank-0 tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def backward_fn(grad):
        return (np.full(x.shape, grad.reshape(()), dtype=x.dtype),)

    return record("sum", (x,), out, backward_fn)


def mean(x: Tensor) -> Tensor:
    """Mean of all elements as a rank-0 tensor."""
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))

    def backward_fn(grad):
        return (np.full(x.shape, grad.reshape(()) / x.size, dtype=x.dtype),)

    return record("mean", (x,), out, backward_fn)


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.data)
    out = Tensor(value)

    def backward_fn(grad):
        return (grad * value,)

    return record("exp", (x,), out, backward_fn)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """
    Natural logarithm, optionally clamped from below.

    Entries below ``floor`` are evaluated at ``floor`` and receive zero gradient.
    """
    clamped = x.data < floor if floor > 0 else np.zeros(x.shape, dtype=bool)
    safe = np.where(clamped, floor, x.data) if floor > 0 else x.data
    out = Tensor(np.log(safe))

    def backward_fn(grad):
        return (np.where(clamped, 0.0, grad / safe).astype(x.dtype),)

    return record("log", (x,), out, backward_fn)
