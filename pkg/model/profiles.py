"""Python module with the named model profiles: paper, desk and grad-check.

* paper: the published architecture (huge CNNFE1 kernels); constructible, slow to train.
* desk: same stage/filter structure with CNNFE1 kernels (9, 7, 5, 3, 3, 3).
* grad-check: 16×16 inputs and tiny widths for end-to-end finite-difference checks.
"""
from typing import List, Optional, Sequence

from model.expressnet import ModelConfig
from model.extractors import (
    CNNFE1_PAPER_STAGES,
    CNNFE2_PAPER_STAGES,
    ExtractorSpec,
    ResidualBackboneSpec,
    StageSpec,
)
from model.moe import MoEConfig
from utilities.exceptions import ConfigError

PROFILES = ("paper", "desk", "grad-check")

CNNFE1_DESK_KERNELS = (9, 7, 5, 3, 3, 3)

_DEFAULTS = {
    "paper": {
        "input_size": 224,
        "cnnfe1": [k for k, _ in CNNFE1_PAPER_STAGES],
        "cnnfe1_filters": [f for _, f in CNNFE1_PAPER_STAGES],
        "cnnfe2": [k for k, _ in CNNFE2_PAPER_STAGES],
        "cnnfe2_filters": [f for _, f in CNNFE2_PAPER_STAGES],
        "dense_units": 512,
        "fusion_width": 512,
        "backbone_blocks": [1, 1],
        "backbone_base_filters": 16,
    },
    "desk": {
        "input_size": 224,
        "cnnfe1": list(CNNFE1_DESK_KERNELS),
        "cnnfe1_filters": [f for _, f in CNNFE1_PAPER_STAGES],
        "cnnfe2": [k for k, _ in CNNFE2_PAPER_STAGES],
        "cnnfe2_filters": [f for _, f in CNNFE2_PAPER_STAGES],
        "dense_units": 512,
        "fusion_width": 512,
        "backbone_blocks": [1, 1],
        "backbone_base_filters": 16,
    },
    "grad-check": {
        "input_size": 16,
        "cnnfe1": [3, 3],
        "cnnfe1_filters": [2, 4],
        "cnnfe2": [3, 3],
        "cnnfe2_filters": [2, 4],
        "dense_units": 8,
        "fusion_width": 8,
        "backbone_blocks": [1, 1],
        "backbone_base_filters": 2,
    },
}


def _stages(kernels: Sequence[int], filters: Sequence[int], dropout: float, pool_last: bool) -> List[StageSpec]:
    if len(kernels) != len(filters):
        raise ConfigError(f"Kernel list {list(kernels)} and filter list {list(filters)} differ in length")
    count = len(kernels)
    return [
        StageSpec(int(k), int(f), dropout, pool=pool_last or index < count - 1)
        for index, (k, f) in enumerate(zip(kernels, filters))
    ]


def build_model_config(
    profile: str = "desk",
    num_classes: int = 7,
    label_smoothing: float = 0.1,
    num_experts: int = 4,
    top_k: int = 2,
    expert_dim: Optional[int] = None,
    renormalize: bool = False,
    conv_dropout: float = 0.1,
    head_dropout: float = 0.5,
    cnnfe1_kernels: Optional[Sequence[int]] = None,
    cnnfe1_filters: Optional[Sequence[int]] = None,
    cnnfe2_kernels: Optional[Sequence[int]] = None,
    cnnfe2_filters: Optional[Sequence[int]] = None,
    backbone_blocks: Optional[Sequence[int]] = None,
    backbone_base_filters: Optional[int] = None,
    input_size: Optional[int] = None,
    seed: int = 0,
    class_names: Optional[Sequence[str]] = None,
) -> ModelConfig:
    """
    Resolve a profile plus explicit overrides into a ModelConfig.

    Any override of the stage lists turns the extractor's scale profile into
    ``custom`` so the exact paper-stage check is not applied to it.

    Args:
        profile: "paper", "desk" or "grad-check"
        num_classes: Output classes
        label_smoothing: Smoothing eps of the loss
        num_experts: Experts per MoE site
        top_k: Experts selected per sample
        expert_dim: Expert output width (defaults to the MoE input width)
        renormalize: Renormalize the selected gate probabilities
        conv_dropout: Dropout after every conv stage
        head_dropout: Dropout after CNNFE1's dense layer, the fusion layer and the backbone
        cnnfe1_kernels / cnnfe1_filters / cnnfe2_kernels / cnnfe2_filters: Stage overrides
        backbone_blocks / backbone_base_filters: Backbone overrides
        input_size: Square input extent override
        seed: Initialization seed
        class_names: Optional class names carried with the model

    Returns:
        ModelConfig
    """
    if profile not in PROFILES:
        raise ConfigError(f"model.profile must be one of {PROFILES}, got '{profile}'")
    defaults = _DEFAULTS[profile]

    def pick(override, key):
        return list(override) if override is not None else list(defaults[key])

    cnnfe1_custom = cnnfe1_kernels is not None or cnnfe1_filters is not None
    cnnfe2_custom = cnnfe2_kernels is not None or cnnfe2_filters is not None
    cnnfe1 = ExtractorSpec(
        stages=_stages(pick(cnnfe1_kernels, "cnnfe1"), pick(cnnfe1_filters, "cnnfe1_filters"), conv_dropout, pool_last=False),
        head="dense",
        scale_profile="custom" if cnnfe1_custom else profile,
        dense_units=defaults["dense_units"],
        head_dropout=head_dropout,
    )
    cnnfe2 = ExtractorSpec(
        stages=_stages(pick(cnnfe2_kernels, "cnnfe2"), pick(cnnfe2_filters, "cnnfe2_filters"), conv_dropout, pool_last=True),
        head="gap",
        scale_profile="custom" if cnnfe2_custom else profile,
    )
    backbone = ResidualBackboneSpec(
        blocks_per_stage=pick(backbone_blocks, "backbone_blocks"),
        base_filters=backbone_base_filters or defaults["backbone_base_filters"],
        head_dropout=head_dropout,
    )
    fusion_width = defaults["fusion_width"]
    moe_kwargs = dict(num_experts=num_experts, top_k=top_k, expert_dim=expert_dim, renormalize=renormalize)
    return ModelConfig(
        cnnfe1=cnnfe1,
        cnnfe2=cnnfe2,
        backbone=backbone,
        moe_a=MoEConfig(input_dim=cnnfe1.dense_units, **moe_kwargs),
        moe_b=MoEConfig(input_dim=fusion_width, **moe_kwargs),
        num_classes=num_classes,
        profile=profile,
        input_size=input_size or defaults["input_size"],
        fusion_width=fusion_width,
        fusion_dropout=head_dropout,
        label_smoothing=label_smoothing,
        seed=seed,
        class_names=list(class_names or []),
    )
