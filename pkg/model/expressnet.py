"""Python module that assembles the full ExpressNet-MoE model and its loss.

    x ─┬─ cnnfe1 ─────────────────────────────── moe_a ─┐
       ├─ cnnfe2 ─┐                                    ├─ concat ─ dense(softmax)
       └─ backbone┴─ concat ─ dense 512 ─ dropout ─ moe_b ─┘
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from autodiff import ops
from autodiff.tensor import Tensor, seeded_rng
from model.extractors import (
    Branch,
    ExtractorSpec,
    ResidualBackboneSpec,
    build_backbone,
    build_cnnfe1,
    build_cnnfe2,
)
from model.layers import Dense, Dropout, Layer, Sequential
from model.moe import MoEConfig, MoELayer, RoutingReport, routing_stats
from model.parameter_store import ParameterStore
from utilities.exceptions import ConfigError, ShapeError

LOG_FLOOR = 1e-7
MODES = ("train", "infer")


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model deterministically."""
    cnnfe1: ExtractorSpec
    cnnfe2: ExtractorSpec
    backbone: ResidualBackboneSpec
    moe_a: MoEConfig
    moe_b: MoEConfig
    num_classes: int = 7
    profile: str = "desk"
    input_size: int = 224
    fusion_width: int = 512
    fusion_dropout: float = 0.5
    label_smoothing: float = 0.1
    seed: int = 0
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"model.num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError(f"model.label_smoothing must be in [0, 0.5), got {self.label_smoothing}")
        if self.moe_a.input_dim != self.cnnfe1.dense_units:
            raise ConfigError("moe_a input width must equal the cnnfe1 output width")
        if self.moe_b.input_dim != self.fusion_width:
            raise ConfigError("moe_b input width must equal the fusion width")
        if self.profile == "paper" and self.fusion_width != 512:
            raise ConfigError("The paper profile uses a 512-unit fusion layer")

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.input_size, self.input_size, 3)


class ExpressNetModel:
    """
    Three extractor branches, a fusion layer, two MoE layers and a softmax head.

    Args:
        config: Model configuration
        rng: Initialization source; defaults to ``seeded_rng(config.seed)``
        logger: Optional logger
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None, logger=None):
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        rng = rng if rng is not None else seeded_rng(config.seed)

        self.cnnfe1: Branch = build_cnnfe1(config.cnnfe1, rng, config.input_shape)
        self.cnnfe2: Branch = build_cnnfe2(config.cnnfe2, rng, config.input_shape)
        self.backbone: Branch = build_backbone(config.backbone, rng, config.input_shape)
        self.fusion = Sequential("fusion", [
            Dense("dense", self.cnnfe2.width + self.backbone.width, config.fusion_width, rng, activation="relu"),
            Dropout("dropout", config.fusion_dropout),
        ])
        self.moe_a = MoELayer("moe_a", config.moe_a, rng)
        self.moe_b = MoELayer("moe_b", config.moe_b, rng)
        self.head = Dense(
            "head", self.moe_a.output_dim + self.moe_b.output_dim, config.num_classes, rng, activation="softmax"
        )
        self._store: Optional[ParameterStore] = None
        self.logger.info(
            f"Built ExpressNet-MoE ({config.profile} profile, {config.num_classes} classes): "
            f"{self.parameter_store().num_parameters():,} parameters"
        )

    def components(self) -> "OrderedDict[str, Layer]":
        return OrderedDict([
            ("cnnfe1", self.cnnfe1),
            ("cnnfe2", self.cnnfe2),
            ("backbone", self.backbone),
            ("fusion", self.fusion),
            ("moe_a", self.moe_a),
            ("moe_b", self.moe_b),
            ("head", self.head),
        ])

    def parameter_store(self) -> ParameterStore:
        if self._store is None:
            params, buffers = OrderedDict(), OrderedDict()
            for cname, component in self.components().items():
                params.update((f"{cname}/{name}", p) for name, p in component.parameters())
                buffers.update((f"{cname}/{name}", b) for name, b in component.buffers())
            self._store = ParameterStore(params, buffers)
        return self._store

    def forward(self, x: Tensor, mode: str = "infer", rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        Class probabilities for a batch of images.

        Args:
            x: N×S×S×3 images in [0, 1]
            mode: "train" (batch statistics, dropout active) or "infer"
            rng: Dropout source, required in train mode

        Returns:
            N×num_classes probabilities, rows summing to 1
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{mode}'")
        if x.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise ShapeError(f"Expected input N×{'×'.join(map(str, self.config.input_shape))}, got {x.shape}")
        training = mode == "train"

        f1 = self.cnnfe1(x, training=training, rng=rng)
        f2 = ops.concat([
            self.cnnfe2(x, training=training, rng=rng),
            self.backbone(x, training=training, rng=rng),
        ])
        f2 = self.fusion(f2, training=training, rng=rng)
        final_features = ops.concat([self.moe_a(f1), self.moe_b(f2)])
        return self.head(final_features)

    __call__ = forward

    def routing(self) -> Dict[str, RoutingReport]:
        """Routing statistics of the most recent forward pass."""
        reports = {}
        for layer in (self.moe_a, self.moe_b):
            if layer.last_probabilities is not None:
                reports[layer.name] = routing_stats(layer.last_probabilities, layer.config.top_k)
        return reports

    def selection_signature(self) -> Tuple[bytes, ...]:
        """Hashable snapshot of the last top-k selections (used by gradient checks)."""
        return tuple(
            layer.last_selection.tobytes() for layer in (self.moe_a, self.moe_b) if layer.last_selection is not None
        )

    def summary_rows(self, batch: int = 1) -> List[Tuple[str, str, Tuple[int, ...], int]]:
        """(layer path, description, output shape, parameter count) for every leaf layer."""
        input_shape = (batch,) + self.config.input_shape
        rows = []
        for branch in (self.cnnfe1, self.cnnfe2, self.backbone):
            rows += branch.summary_rows(input_shape, prefix=f"{branch.name}/")
        fusion_in = (batch, self.cnnfe2.width + self.backbone.width)
        rows += self.fusion.summary_rows(fusion_in, prefix="fusion/")
        rows += self.moe_a.summary_rows((batch, self.config.moe_a.input_dim), prefix="moe_a/")
        rows += self.moe_b.summary_rows((batch, self.config.moe_b.input_dim), prefix="moe_b/")
        rows.append(("head", self.head.describe(), (batch, self.config.num_classes), self.head.num_parameters()))
        return rows


def categorical_crossentropy(pred: Tensor, target, smoothing: float = 0.0) -> Tensor:
    """
    Mean categorical cross-entropy with label smoothing.

    Targets are smoothed to (1 - eps) * y + eps / K and log(p) is clamped at p >= 1e-7.

    Args:
        pred: N×K predicted probabilities
        target: N×K one-hot targets (array or Tensor)
        smoothing: eps in [0, 0.5)

    Returns:
        Scalar loss tensor
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.ndim != 2 or target.shape != pred.shape:
        raise ShapeError(f"Prediction {pred.shape} and target {target.shape} must both be N×K")
    if np.any(pred.data < 0):
        raise ValueError("Predictions must be non-negative probabilities")
    n, k = pred.shape
    smoothed = ((1.0 - smoothing) * target + smoothing / k).astype(pred.dtype)
    log_probs = ops.log(pred, floor=LOG_FLOOR)
    total = ops.sum(ops.mul(log_probs, Tensor(smoothed)))
    return ops.mul(total, -1.0 / n)


def count_parameters(model: ExpressNetModel) -> "OrderedDict[str, int]":
    """Exact parameter counts per component plus ``total``."""
    counts = OrderedDict((name, component.num_parameters()) for name, component in model.components().items())
    counts["total"] = sum(counts.values())
    return counts
