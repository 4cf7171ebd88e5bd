"""Python module that compares tape gradients against central finite differences."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Mapping, Optional

import numpy as np

from autodiff.tensor import Tape, Tensor

logger = logging.getLogger(__name__)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """
    Norm-based relative error ``|a - n| / max(|a|, |n|)``.

    Returns 0 when both vectors are (numerically) zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


@dataclass
class GradCheckResult:
    """Outcome of one finite-difference comparison."""
    component: str
    per_tensor: Dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0

    @property
    def max_error(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance


def gradient_check(
    loss_fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    component: str = "",
    step: float = 1e-4,
    max_entries: int = 0,
    rng: Optional[np.random.Generator] = None,
    selection_fn: Optional[Callable[[], Hashable]] = None,
) -> GradCheckResult:
    """
    Check the analytic gradient of ``loss_fn`` w.r.t. each tensor entry by entry.

    ``loss_fn`` must be deterministic (reseed any dropout stream inside it). When
    ``selection_fn`` is given it is read after every evaluation; entries whose
    ±step perturbation changes the returned value (for example a top-k expert
    set) are skipped and counted instead of compared.

    Args:
        loss_fn: Builds a scalar loss from the current tensor values
        tensors: Named tensors to differentiate against (mutated and restored)
        component: Label used in the result
        step: Finite-difference step h
        max_entries: Check at most this many entries per tensor (0 means all)
        rng: Source used to sample entries when ``max_entries`` applies
        selection_fn: Optional snapshot of discrete routing decisions

    Returns:
        A GradCheckResult with one relative error per tensor
    """
    result = GradCheckResult(component=component)
    for tensor in tensors.values():
        tensor.zero_grad()

    with Tape() as tape:
        loss = loss_fn()
    baseline = selection_fn() if selection_fn else None
    tape.backward(loss)

    rng = rng if rng is not None else np.random.default_rng(0)
    for name, tensor in tensors.items():
        analytic_full = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if max_entries and tensor.size > max_entries:
            indices = np.sort(rng.choice(tensor.size, size=max_entries, replace=False))
        else:
            indices = np.arange(tensor.size)

        analytic, numeric = [], []
        tensor.data = np.ascontiguousarray(tensor.data)
        flat = tensor.data.reshape(-1)
        for index in indices:
            original = flat[index]
            flat[index] = original + step
            plus = float(loss_fn().data)
            moved_up = selection_fn() if selection_fn else None
            flat[index] = original - step
            minus = float(loss_fn().data)
            moved_down = selection_fn() if selection_fn else None
            flat[index] = original
            if selection_fn and (moved_up != baseline or moved_down != baseline):
                result.skipped += 1
                continue
            numeric.append((plus - minus) / (2.0 * step))
            analytic.append(analytic_full.reshape(-1)[index])

        result.per_tensor[name] = relative_error(np.array(analytic), np.array(numeric))
        result.checked += len(numeric)
        logger.debug(f"{component}/{name}: rel. err {result.per_tensor[name]:.3e} over {len(numeric)} entries")

    return result
