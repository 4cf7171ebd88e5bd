"""Imports for utililty functions."""

from .general_utils import load_json, plot_class_distribution, plot_confusion_matrix, plot_training_curves, save_plot

__all__ = [
    "load_json",
    "save_plot",
    "plot_class_distribution",
    "plot_confusion_matrix",
    "plot_training_curves",
]
