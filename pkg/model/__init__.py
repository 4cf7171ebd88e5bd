"""Imports for model classes."""

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .expressnet import ExpressNetModel, ModelConfig, categorical_crossentropy, count_parameters
from .moe import MoEConfig, MoELayer, routing_stats
from .profiles import PROFILES, build_model_config

__all__ = [
    "ExpressNetModel",
    "ModelConfig",
    "categorical_crossentropy",
    "count_parameters",
    "MoEConfig",
    "MoELayer",
    "routing_stats",
    "PROFILES",
    "build_model_config",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
]
