"""Imports for the tensor engine: tensors, tape, operations and gradient checking."""

from .tensor import (
    Parameter,
    Tape,
    Tensor,
    backward,
    checked_mode,
    corrupt_backward,
    get_default_dtype,
    precision,
    seeded_rng,
)
from . import ops
from .gradcheck import GradCheckResult, gradient_check, relative_error

__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "checked_mode",
    "corrupt_backward",
    "get_default_dtype",
    "precision",
    "seeded_rng",
    "ops",
    "GradCheckResult",
    "gradient_check",
    "relative_error",
]
