"""Imports for dataloaders."""

from .expression_dataset import (
    Batch,
    BatchGenerator,
    DatasetManifest,
    ExpressionDataset,
    LabeledSample,
    batch_generator,
    carve_validation,
    load_manifest,
    one_hot,
    preprocess,
    stratified_split,
)
from .synthetic import make_fixture

__all__ = [
    "Batch",
    "BatchGenerator",
    "DatasetManifest",
    "ExpressionDataset",
    "LabeledSample",
    "batch_generator",
    "carve_validation",
    "load_manifest",
    "one_hot",
    "preprocess",
    "stratified_split",
    "make_fixture",
]
