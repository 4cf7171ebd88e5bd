"""Python files that contain some general utility functions: json loading and the run plots."""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

logger = logging.getLogger(__name__)


# Helper functions to load json file
def load_json(json_path: str):
    try:
        with open(json_path, 'r') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Error decoding JSON from {json_path}: {e}")
        return None


# Helper function to save the plot.
def save_plot(fig, output_path) -> Path:
    """
    Saves the figure as a PNG and closes it.

    Args:
        fig (matplotlib.figure.Figure): The figure to save.
        output_path: Destination file; parent directories are created.
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Plot saved to {output_path}")
    return output_path


def plot_training_curves(history: Dict[str, List[float]], output_path) -> Path:
    """Accuracy and loss per epoch, train against validation."""
    epochs = np.arange(1, len(history["train_loss"]) + 1)
    fig, (acc_ax, loss_ax) = plt.subplots(1, 2, figsize=(11, 4))
    acc_ax.plot(epochs, history["train_acc"], marker="o", label="train")
    acc_ax.plot(epochs, history["val_acc"], marker="o", label="validation")
    acc_ax.set_title("Accuracy")
    loss_ax.plot(epochs, history["train_loss"], marker="o", label="train")
    loss_ax.plot(epochs, history["val_loss"], marker="o", label="validation")
    loss_ax.set_title("Loss")
    for ax in (acc_ax, loss_ax):
        ax.set_xlabel("epoch")
        ax.legend()
        ax.grid(alpha=0.3)
    return save_plot(fig, output_path)


def plot_confusion_matrix(cm: np.ndarray, class_names: Sequence[str], output_path, title: Optional[str] = None) -> Path:
    """Row-normalised confusion heatmap annotated with the raw counts."""
    cm = np.asarray(cm)
    rows = cm.sum(axis=1, keepdims=True)
    normalised = np.divide(cm, rows, out=np.zeros(cm.shape, dtype=np.float64), where=rows > 0)
    size = max(5, 0.8 * len(class_names) + 2)
    fig, ax = plt.subplots(figsize=(size, size * 0.85))
    sns.heatmap(
        normalised, annot=cm, fmt="d", cmap="Blues", vmin=0.0, vmax=1.0,
        xticklabels=class_names, yticklabels=class_names, ax=ax,
    )
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title or "Confusion matrix")
    return save_plot(fig, output_path)


def plot_class_distribution(distribution: pd.DataFrame, output_path) -> Path:
    """Grouped bar chart of per-class sample counts for each split."""
    splits = [column for column in distribution.columns if column != "total"]
    long = distribution[splits].rename_axis("class").reset_index().melt(id_vars="class", var_name="split", value_name="count")
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(distribution)), 4))
    sns.barplot(data=long, x="class", y="count", hue="split", ax=ax)
    ax.set_xlabel("")
    ax.set_title("Class distribution")
    ax.tick_params(axis="x", rotation=30)
    return save_plot(fig, output_path)
