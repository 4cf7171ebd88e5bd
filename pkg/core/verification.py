"""Python module with the finite-difference verification suite run by ``gradcheck``.

Every layer operation is checked on its own in 64-bit precision, then the whole
model is checked end to end at the grad-check profile.
"""
import contextlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from autodiff import ops
from autodiff.gradcheck import GradCheckResult, gradient_check
from autodiff.tensor import Parameter, Tensor, corrupt_backward, precision, seeded_rng
from model import functional as F
from model.expressnet import ExpressNetModel, categorical_crossentropy
from model.layers import ResidualBlock
from model.moe import MoEConfig, MoELayer
from model.profiles import build_model_config
from utilities.exceptions import GradCheckError

logger = logging.getLogger(__name__)

ComponentCheck = Callable[[np.random.Generator, float, int], GradCheckResult]


@dataclass
class SuiteSettings:
    step: float = 1e-4
    layer_tolerance: float = 1e-4
    model_tolerance: float = 1e-3
    max_entries: int = 0
    batch_size: int = 2
    seed: int = 0
    num_classes: int = 3
    corrupt_op: Optional[str] = None


@dataclass
class SuiteRow:
    component: str
    max_error: float
    tolerance: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    # Fixed random projection so every output entry contributes to the scalar.
    weights = Tensor(rng.normal(size=out.shape))
    return lambda value: ops.sum(ops.mul(value, weights))


def _param(rng, *shape, low=None) -> Parameter:
    data = rng.normal(size=shape)
    if low is not None:
        data = np.sign(data) * rng.uniform(low, 1.0, size=shape)
    return Parameter(data)


def _check(name, forward, tensors, rng, step, max_entries, selection_fn=None) -> GradCheckResult:
    project = _projected(forward(), rng)
    return gradient_check(
        lambda: project(forward()), tensors, component=name, step=step,
        max_entries=max_entries, rng=rng, selection_fn=selection_fn,
    )


def check_add(rng, step, max_entries):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    return _check("add", lambda: ops.add(a, b), {"a": a, "b": b}, rng, step, max_entries)


def check_matmul(rng, step, max_entries):
    a, b = _param(rng, 3, 5), _param(rng, 5, 2)
    return _check("matmul", lambda: ops.matmul(a, b), {"a": a, "b": b}, rng, step, max_entries)


def check_conv2d(rng, step, max_entries):
    x, kernel, bias = _param(rng, 2, 5, 5, 2), _param(rng, 3, 3, 2, 3), _param(rng, 3)
    return _check(
        "conv2d", lambda: F.conv2d(x, kernel, bias, padding="same"),
        {"x": x, "kernel": kernel, "bias": bias}, rng, step, max_entries,
    )


def check_relu(rng, step, max_entries):
    x = _param(rng, 4, 6, low=0.1)
    return _check("relu", lambda: F.relu(x), {"x": x}, rng, step, max_entries)


def check_batchnorm(rng, step, max_entries):
    x, gamma, beta = _param(rng, 3, 4, 4, 2), _param(rng, 2), _param(rng, 2)
    mean, var = Tensor(np.zeros(2)), Tensor(np.ones(2))
    return _check(
        "batchnorm", lambda: F.batchnorm(x, gamma, beta, mean, var, training=True),
        {"x": x, "gamma": gamma, "beta": beta}, rng, step, max_entries,
    )


def check_maxpool(rng, step, max_entries):
    x = _param(rng, 2, 6, 6, 2)
    return _check("maxpool2d", lambda: F.maxpool2d(x), {"x": x}, rng, step, max_entries)


def check_global_average_pool(rng, step, max_entries):
    x = _param(rng, 2, 3, 4, 3)
    return _check("global_average_pool", lambda: F.global_average_pool(x), {"x": x}, rng, step, max_entries)


def check_dense(rng, step, max_entries):
    x, weight, bias = _param(rng, 4, 5), _param(rng, 5, 3), _param(rng, 3)
    return _check(
        "dense", lambda: F.dense(x, weight, bias, "none"),
        {"x": x, "weight": weight, "bias": bias}, rng, step, max_entries,
    )


def check_softmax(rng, step, max_entries):
    z = _param(rng, 3, 5)
    return _check("softmax", lambda: F.softmax(z), {"z": z}, rng, step, max_entries)


def check_dropout(rng, step, max_entries):
    x = _param(rng, 4, 6)
    seed = int(rng.integers(2 ** 31))
    return _check(
        "dropout", lambda: F.dropout(x, 0.5, True, seeded_rng(seed)), {"x": x}, rng, step, max_entries,
    )


def check_concat(rng, step, max_entries):
    a, b = _param(rng, 3, 2), _param(rng, 3, 4)
    return _check("concat", lambda: ops.concat([a, b]), {"a": a, "b": b}, rng, step, max_entries)


def check_flatten(rng, step, max_entries):
    x = _param(rng, 2, 3, 3, 2)
    return _check("flatten", lambda: F.flatten(x), {"x": x}, rng, step, max_entries)


def check_residual_block(rng, step, max_entries):
    block = ResidualBlock("block", 2, 4, 2, rng)
    x = _param(rng, 2, 6, 6, 2)
    tensors = {"x": x, **dict(block.parameters())}
    return _check(
        "residual_block", lambda: block(x, training=True), tensors, rng, step, max_entries,
    )


def check_moe(rng, step, max_entries):
    layer = MoELayer("moe", MoEConfig(input_dim=6, num_experts=4, top_k=2), rng)
    x = _param(rng, 3, 6)
    tensors = {"x": x, **dict(layer.parameters())}
    return _check(
        "moe", lambda: layer(x), tensors, rng, step, max_entries,
        selection_fn=lambda: layer.last_selection.tobytes(),
    )


def check_loss(rng, step, max_entries):
    logits = _param(rng, 4, 5)
    target = np.eye(5)[rng.integers(0, 5, size=4)]
    return gradient_check(
        lambda: categorical_crossentropy(F.softmax(logits), target, 0.1),
        {"logits": logits}, component="loss", step=step, max_entries=max_entries, rng=rng,
    )


LAYER_CHECKS: Dict[str, ComponentCheck] = {
    "add": check_add,
    "matmul": check_matmul,
    "conv2d": check_conv2d,
    "relu": check_relu,
    "batchnorm": check_batchnorm,
    "maxpool2d": check_maxpool,
    "global_average_pool": check_global_average_pool,
    "dense": check_dense,
    "softmax": check_softmax,
    "dropout": check_dropout,
    "concat": check_concat,
    "flatten": check_flatten,
    "residual_block": check_residual_block,
    "moe": check_moe,
    "loss": check_loss,
}


def check_model(settings: SuiteSettings) -> GradCheckResult:
    """
    End-to-end check of every parameter of a grad-check-profile model in train mode.

    Dropout is reseeded on every evaluation; perturbations that change any
    MoE top-k selection are skipped and counted.
    """
    rng = seeded_rng((settings.seed, 1))
    config = build_model_config("grad-check", num_classes=settings.num_classes, seed=settings.seed)
    model = ExpressNetModel(config, logger=logger)
    x = Tensor(rng.uniform(0.0, 1.0, size=(settings.batch_size,) + config.input_shape))
    target = np.eye(settings.num_classes)[rng.integers(0, settings.num_classes, size=settings.batch_size)]

    def loss_fn():
        probs = model.forward(x, mode="train", rng=seeded_rng((settings.seed, 2)))
        return categorical_crossentropy(probs, target, config.label_smoothing)

    return gradient_check(
        loss_fn,
        model.parameter_store().parameters,
        component="model",
        step=settings.step,
        max_entries=settings.max_entries,
        rng=rng,
        selection_fn=model.selection_signature,
    )


def run_suite(settings: SuiteSettings, components: Optional[List[str]] = None, logger=None) -> List[SuiteRow]:
    """
    Run the layer checks and the end-to-end model check in 64-bit precision.

    Args:
        settings: Step, tolerances and seeds
        components: Subset of component names to run (``model`` included); all by default
        logger: Optional logger

    Returns:
        One SuiteRow per component
    """
    logger = logger or logging.getLogger(__name__)
    selected = components or list(LAYER_CHECKS) + ["model"]
    unknown = [name for name in selected if name not in LAYER_CHECKS and name != "model"]
    if unknown:
        raise ValueError(f"Unknown gradient-check components {unknown}")

    rows = []
    with precision(np.float64), _maybe_corrupt(settings.corrupt_op):
        for index, name in enumerate(selected):
            if name == "model":
                result, tolerance = check_model(settings), settings.model_tolerance
            else:
                rng = seeded_rng((settings.seed, 0, index))
                result = LAYER_CHECKS[name](rng, settings.step, settings.max_entries)
                tolerance = settings.layer_tolerance
            row = SuiteRow(name, result.max_error, tolerance, result.checked, result.skipped)
            rows.append(row)
            status = "ok" if row.passed else "FAIL"
            logger.info(
                f"{name:<20} max rel. err {row.max_error:.3e} (tol {tolerance:.0e}), "
                f"{row.checked} entries, {row.skipped} skipped: {status}"
            )
    return rows


def _maybe_corrupt(op: Optional[str]):
    if op:
        logger.warning(f"Backward rule of '{op}' is deliberately corrupted")
        return corrupt_backward(op)
    return contextlib.nullcontext()


def raise_on_failure(rows: List[SuiteRow]) -> None:
    """Raise GradCheckError naming the worst failing component (relative to its tolerance)."""
    failed = [row for row in rows if not row.passed]
    if not failed:
        return
    worst = max(failed, key=lambda row: row.max_error / row.tolerance)
    raise GradCheckError(worst.component, worst.max_error, worst.tolerance, [row.component for row in failed])


def summary_table(rows: List[SuiteRow]) -> List[Tuple[str, float, float, int, int, bool]]:
    return [(r.component, r.max_error, r.tolerance, r.checked, r.skipped, r.passed) for r in rows]
