"""Python module with the tensor type, the gradient tape and the precision/RNG switches.

Every differentiable operation in the package goes through ``record``: it stores
the operation on the active ``Tape`` (if any) together with a backward rule that
maps the output gradient to one gradient per input. ``Tape.backward`` replays the
records in reverse order.
"""
import contextlib
import logging
from typing import Callable, Iterator, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np

from utilities.exceptions import NumericalError, ShapeError, TapeError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_STATE = {"dtype": np.dtype(np.float32), "checked": False}
_TAPE_STACK: List["Tape"] = []
_CORRUPTED_OPS: Set[str] = set()


def get_default_dtype() -> np.dtype:
    """Floating dtype used for newly created tensors and parameters."""
    return _STATE["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """
    Temporarily switch the default floating dtype.

    Args:
        dtype: ``np.float32`` (default mode) or ``np.float64`` (gradient checking)
    """
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported precision {dtype}; use float32 or float64")
    previous = _STATE["dtype"]
    _STATE["dtype"] = dtype
    try:
        yield dtype
    finally:
        _STATE["dtype"] = previous


def is_checked() -> bool:
    return _STATE["checked"]


@contextlib.contextmanager
def checked_mode(enabled: bool = True) -> Iterator[None]:
    """Verify that every op output and every gradient is finite while active."""
    previous = _STATE["checked"]
    _STATE["checked"] = enabled
    try:
        yield
    finally:
        _STATE["checked"] = previous


def seeded_rng(seed: Union[int, Sequence[int]]) -> np.random.Generator:
    """
    Create the package's random source.

    The bit generator is always PCG64 fed through NumPy's ``SeedSequence``; both
    are fixed algorithms, so a seed yields the same draws on every platform. A
    sequence such as ``(seed, epoch, step)`` gives independent, reproducible
    sub-streams.

    Args:
        seed: Non-negative integer or sequence of non-negative integers

    Returns:
        A NumPy ``Generator``
    """
    return np.random.Generator(np.random.PCG64(seed))


def _ensure_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"Non-finite values in {what}")


class Tensor:
    """
    Dense n-dimensional array with an optional gradient buffer.

    The data array is treated as immutable once created; only ``grad`` changes
    (and parameters, through the optimizer).
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        array = np.asarray(data, dtype=dtype)
        if any(extent < 1 for extent in array.shape):
            raise ShapeError(f"All extents must be >= 1, got shape {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        """Add ``grad`` into the gradient buffer, allocating it on first use."""
        if grad.shape != self.data.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        grad = grad.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def backward(self, tape: Optional["Tape"] = None) -> None:
        tape = tape or current_tape()
        if tape is None:
            raise TapeError("No tape given and none is active")
        tape.backward(self)

    def __add__(self, other):
        from autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from autodiff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from autodiff import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from autodiff import ops
        return ops.matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor; always requires a gradient and may be updated in place."""

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)

    def assign(self, values: np.ndarray) -> None:
        """Overwrite the values in place, keeping shape and dtype."""
        values = np.asarray(values)
        if values.shape != self.data.shape:
            raise ShapeError(f"Cannot assign shape {values.shape} to parameter of shape {self.data.shape}")
        self.data[...] = values

    def cast(self, dtype) -> None:
        """Change the storage dtype (used to switch a whole model to 64-bit)."""
        self.data = self.data.astype(dtype)
        self.grad = None if self.grad is None else self.grad.astype(dtype)


class OpRecord(NamedTuple):
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class Tape:
    """
    Ordered record of differentiable operations.

    Used as a context manager; while active, every op whose inputs require a
    gradient is appended here::

        with Tape() as tape:
            loss = model.loss(batch)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: List[OpRecord] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> None:
        self.records.append(OpRecord(op, tuple(inputs), output, backward_fn))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        """
        Propagate d(loss)/d(tensor) to every tensor reachable from ``loss``.

        Gradients are added to the existing buffers, so replaying the same tape
        twice without zeroing doubles them.

        Args:
            loss: Scalar tensor produced by an operation on this tape
        """
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not any(record.output is loss for record in self.records):
            raise TapeError("Loss tensor was not produced on this tape")

        pending = {id(loss): np.ones_like(loss.data)}
        tensors = {id(loss): loss}
        for record in reversed(self.records):
            upstream = pending.get(id(record.output))
            if upstream is None:
                continue
            input_grads = record.backward_fn(upstream)
            if record.op in _CORRUPTED_OPS:
                input_grads = [None if grad is None else grad * 1.5 + 1e-3 for grad in input_grads]
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + grad
                else:
                    pending[key] = grad
                    tensors[key] = tensor

        checked = is_checked()
        for key, grad in pending.items():
            if checked:
                _ensure_finite(grad, f"gradient of {tensors[key]!r}")
            tensors[key].accumulate_grad(grad)


def current_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> Tensor:
    """
    Register an op's output on the active tape.

    Args:
        op: Operation name, used in diagnostics and by the fault hook
        inputs: Tensors the output depends on, in the order ``backward_fn`` returns
        output: Freshly computed output tensor
        backward_fn: Maps the output gradient to one gradient (or None) per input

    Returns:
        The same ``output`` tensor
    """
    if is_checked():
        _ensure_finite(output.data, f"output of {op}")
    tape = current_tape()
    if tape is not None and any(tensor.requires_grad for tensor in inputs):
        output.requires_grad = True
        tape.record(op, inputs, output, backward_fn)
    return output


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every tensor reachable backward from ``loss``."""
    tape.backward(loss)


@contextlib.contextmanager
def corrupt_backward(op: str) -> Iterator[None]:
    """Fault hook: distort the backward rule of ``op`` (used to test the gradient checker)."""
    _CORRUPTED_OPS.add(op)
    try:
        yield
    finally:
        _CORRUPTED_OPS.discard(op)
