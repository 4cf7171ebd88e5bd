"""Imports for core modules and functionalities."""

from .emotion_schema import EMOTION_SCHEMA, load_emotion_schema, resolve_class_names
from .expression_system import ExpressionRecognitionSystem
from .metrics import ClassificationReport, confusion, render_report, report
from .run_data_manager import RunDataManager
from .trainer import AdamState, TrainConfig, Trainer, TrainLog, adam_step, read_train_log

__all__ = [
    "EMOTION_SCHEMA",
    "load_emotion_schema",
    "resolve_class_names",
    "ExpressionRecognitionSystem",
    "ClassificationReport",
    "confusion",
    "render_report",
    "report",
    "RunDataManager",
    "AdamState",
    "TrainConfig",
    "Trainer",
    "TrainLog",
    "adam_step",
    "read_train_log",
]
