"""Python module that builds the three parallel feature-extractor branches.

* CNNFE1: large-to-small kernels, flatten, dense 512, dropout 0.5.
* CNNFE2: five conv stages, global average pooling.
* Backbone: randomly initialized pre-activation residual network (stand-in for ResNet-50).
"""
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from model.layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAveragePool,
    MaxPool2D,
    ReLU,
    ResidualBlock,
    Sequential,
    Shape,
)
from utilities.exceptions import ConfigError

logger = logging.getLogger(__name__)

CNNFE1_PAPER_STAGES = ((75, 8), (50, 16), (25, 32), (15, 64), (9, 128), (3, 256))
CNNFE2_PAPER_STAGES = ((15, 16), (7, 32), (5, 64), (3, 128), (3, 256))


@dataclass(frozen=True)
class StageSpec:
    kernel_size: int
    filters: int
    dropout_rate: float = 0.1
    pool: bool = True


@dataclass
class ExtractorSpec:
    """Stage list and head of a convolutional extractor."""
    stages: List[StageSpec]
    head: str  # "dense" (flatten + dense + dropout) or "gap"
    scale_profile: str = "paper"
    dense_units: int = 512
    head_dropout: float = 0.5

    def stage_pairs(self) -> Tuple[Tuple[int, int], ...]:
        return tuple((stage.kernel_size, stage.filters) for stage in self.stages)


@dataclass
class ResidualBackboneSpec:
    blocks_per_stage: List[int] = field(default_factory=lambda: [1, 1])
    base_filters: int = 16
    stem_kernel: int = 7
    head_dropout: float = 0.5

    @property
    def width(self) -> int:
        return self.base_filters * 2 ** (len(self.blocks_per_stage) - 1)


class Branch(Sequential):
    """A feature extractor: N×S×S×3 in, N×width out."""

    def __init__(self, name: str, layers, input_shape: Shape):
        super().__init__(name, layers)
        self.input_shape = tuple(input_shape)
        self.width = self.output_shape((1,) + self.input_shape)[-1]


def _validate_stages(spec: ExtractorSpec, branch: str) -> None:
    if not spec.stages:
        raise ConfigError(f"{branch}: at least one stage is required")
    for index, stage in enumerate(spec.stages):
        if stage.kernel_size < 1 or stage.filters < 1:
            raise ConfigError(f"{branch}: stage {index} needs kernel size and filters >= 1, got {stage}")
        if not 0.0 <= stage.dropout_rate < 1.0:
            raise ConfigError(f"{branch}: stage {index} dropout rate must be in [0, 1)")


def _conv_stages(spec: ExtractorSpec, rng: np.random.Generator, in_channels: int) -> List[Sequential]:
    # conv(same, ReLU) -> dropout -> batchnorm -> maxpool, in both extractors.
    stages = []
    for index, stage in enumerate(spec.stages):
        layers = [
            Conv2D("conv", in_channels, stage.filters, stage.kernel_size, rng),
            Dropout("dropout", stage.dropout_rate),
            BatchNorm("bn", stage.filters),
        ]
        if stage.pool:
            layers.append(MaxPool2D("pool"))
        stages.append(Sequential(f"stage{index}", layers))
        in_channels = stage.filters
    return stages


def build_cnnfe1(spec: ExtractorSpec, rng: np.random.Generator, input_shape: Shape = (224, 224, 3)) -> Branch:
    """
    Build CNNFE1: conv stages, then flatten -> dense(ReLU) -> dropout.

    Args:
        spec: Stage list; the paper profile must match the published stages exactly
        rng: Initialization source
        input_shape: H×W×C of the input images

    Returns:
        Branch mapping N×H×W×C to N×dense_units
    """
    _validate_stages(spec, "cnnfe1")
    if spec.head != "dense":
        raise ConfigError("cnnfe1: head must be 'dense' (flatten + dense)")
    if spec.scale_profile == "paper":
        pools = [stage.pool for stage in spec.stages]
        if spec.stage_pairs() != CNNFE1_PAPER_STAGES or pools != [True] * 5 + [False] or spec.dense_units != 512:
            raise ConfigError(f"cnnfe1: paper profile must use stages {CNNFE1_PAPER_STAGES}, got {spec.stage_pairs()}")

    stages = _conv_stages(spec, rng, input_shape[-1])
    flat_features = Sequential("stages", stages).output_shape((1,) + tuple(input_shape))
    flat_width = int(np.prod(flat_features[1:]))
    layers = stages + [
        Flatten("flatten"),
        Dense("dense", flat_width, spec.dense_units, rng, activation="relu"),
        Dropout("dropout", spec.head_dropout),
    ]
    branch = Branch("cnnfe1", layers, input_shape)
    logger.debug(f"Built cnnfe1 ({spec.scale_profile}): {branch.num_parameters()} parameters")
    return branch


def build_cnnfe2(spec: ExtractorSpec, rng: np.random.Generator, input_shape: Shape = (224, 224, 3)) -> Branch:
    """
    Build CNNFE2: conv stages followed by global average pooling.

    Args:
        spec: Stage list; the paper profile must match the published stages exactly
        rng: Initialization source
        input_shape: H×W×C of the input images

    Returns:
        Branch mapping N×H×W×C to N×(last stage filters)
    """
    _validate_stages(spec, "cnnfe2")
    if spec.head != "gap":
        raise ConfigError("cnnfe2: head must be 'gap'")
    if spec.scale_profile == "paper" and spec.stage_pairs() != CNNFE2_PAPER_STAGES:
        raise ConfigError(f"cnnfe2: paper profile must use stages {CNNFE2_PAPER_STAGES}, got {spec.stage_pairs()}")

    layers = _conv_stages(spec, rng, input_shape[-1]) + [GlobalAveragePool("gap")]
    branch = Branch("cnnfe2", layers, input_shape)
    logger.debug(f"Built cnnfe2 ({spec.scale_profile}): {branch.num_parameters()} parameters")
    return branch


def build_backbone(spec: ResidualBackboneSpec, rng: np.random.Generator, input_shape: Shape = (224, 224, 3)) -> Branch:
    """
    Build the residual backbone: stem, residual stages, BN-ReLU, GAP, dropout.

    Stage ``i`` has ``base_filters * 2**i`` channels; every stage after the first
    starts with a stride-2 block whose shortcut is a 1×1 projection.

    Args:
        spec: Blocks per stage and base width
        rng: Initialization source
        input_shape: H×W×C of the input images

    Returns:
        Branch mapping N×H×W×C to N×spec.width
    """
    if not spec.blocks_per_stage or any(blocks < 1 for blocks in spec.blocks_per_stage):
        raise ConfigError(f"backbone: blocks_per_stage must be a non-empty list of positive integers, got {spec.blocks_per_stage}")
    if spec.base_filters < 1:
        raise ConfigError("backbone: base_filters must be >= 1")

    layers = [Sequential("stem", [
        Conv2D("conv", input_shape[-1], spec.base_filters, spec.stem_kernel, rng, stride=2, activation="none"),
        BatchNorm("bn", spec.base_filters),
        ReLU("relu"),
        MaxPool2D("pool"),
    ])]
    channels = spec.base_filters
    for stage, blocks in enumerate(spec.blocks_per_stage):
        filters = spec.base_filters * 2 ** stage
        for block in range(blocks):
            stride = 2 if stage > 0 and block == 0 else 1
            layers.append(ResidualBlock(f"stage{stage}_block{block}", channels, filters, stride, rng))
            channels = filters
    layers += [
        BatchNorm("bn_final", channels),
        ReLU("relu_final"),
        GlobalAveragePool("gap"),
        Dropout("dropout", spec.head_dropout),
    ]
    branch = Branch("backbone", layers, input_shape)
    logger.debug(f"Built backbone {spec.blocks_per_stage}x{spec.base_filters}: {branch.num_parameters()} parameters")
    return branch


def residual_blocks(branch: Branch) -> Sequence[ResidualBlock]:
    return [layer for layer in branch.layers if isinstance(layer, ResidualBlock)]
