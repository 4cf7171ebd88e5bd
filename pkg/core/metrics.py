"""Python module for the evaluation metrics: confusion matrix, classification report and its renderings.

Rates with a zero denominator are defined as 0. Per-class accuracy (p-Acc) is
the one-vs-rest accuracy (TP + TN) / N.
"""
import json
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix

ZERO_DIVISION_NOTE = "Rates with a zero denominator are reported as 0."


def confusion(true_labels: Sequence[int], predicted_labels: Sequence[int], num_classes: int) -> np.ndarray:
    """
    K×K confusion counts; rows are true classes, columns predicted classes.

    Raises:
        ValueError: On unequal lengths or labels outside [0, K)
    """
    true_labels = np.asarray(true_labels, dtype=np.int64).ravel()
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if true_labels.shape != predicted_labels.shape:
        raise ValueError(f"{true_labels.size} true labels but {predicted_labels.size} predictions")
    for name, labels in (("true", true_labels), ("predicted", predicted_labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in [0, {num_classes})")
    if true_labels.size == 0:
        return np.zeros((num_classes, num_classes), dtype=np.int64)
    return confusion_matrix(true_labels, predicted_labels, labels=np.arange(num_classes)).astype(np.int64)


def _safe_divide(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    numerator = np.asarray(numerator, dtype=np.float64)
    denominator = np.asarray(denominator, dtype=np.float64)
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=denominator > 0)
    return out


@dataclass
class ClassificationReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    p_acc: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float

    @property
    def num_classes(self) -> int:
        return len(self.support)

    @property
    def total(self) -> int:
        return int(self.support.sum())


def report(cm: np.ndarray) -> ClassificationReport:
    """
    Per-class and macro statistics of a confusion matrix.

    Args:
        cm: K×K counts, rows true, columns predicted

    Returns:
        ClassificationReport

    Raises:
        ValueError: If the matrix is not square, has negative entries or no samples
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"Confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("Confusion matrix counts must be non-negative")
    total = cm.sum()
    if total == 0:
        raise ValueError("Confusion matrix is empty")

    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    fp = predicted - tp
    fn = support - tp
    tn = total - tp - fp - fn

    precision = _safe_divide(tp, predicted)
    recall = _safe_divide(tp, support)
    f1 = _safe_divide(2 * precision * recall, precision + recall)
    return ClassificationReport(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support.astype(np.int64),
        p_acc=(tp + tn) / total,
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


def report_to_dict(rep: ClassificationReport, class_names: Sequence[str]) -> dict:
    """JSON-ready dictionary with rates rounded to 4 decimals."""
    if len(class_names) != rep.num_classes:
        raise ValueError(f"{len(class_names)} class names for a {rep.num_classes}-class report")
    return {
        "classes": [
            {
                "name": name,
                "precision": round(float(rep.precision[i]), 4),
                "recall": round(float(rep.recall[i]), 4),
                "f1": round(float(rep.f1[i]), 4),
                "support": int(rep.support[i]),
                "p_acc": round(float(rep.p_acc[i]), 4),
            }
            for i, name in enumerate(class_names)
        ],
        "accuracy": round(rep.accuracy, 4),
        "macro": {
            "precision": round(rep.macro_precision, 4),
            "recall": round(rep.macro_recall, 4),
            "f1": round(rep.macro_f1, 4),
        },
        "total": rep.total,
        "zero_division": 0,
    }


def render_text(rep: ClassificationReport, class_names: Sequence[str]) -> str:
    """Fixed-width text table with 2-decimal rates and a macro block."""
    if len(class_names) != rep.num_classes:
        raise ValueError(f"{len(class_names)} class names for a {rep.num_classes}-class report")
    width = max(12, max(len(name) for name in class_names))
    header = f"{'':>{width}} {'precision':>10} {'recall':>10} {'f1-score':>10} {'support':>10} {'p-Acc':>10}"
    lines = [header, ""]
    for i, name in enumerate(class_names):
        lines.append(
            f"{name:>{width}} {rep.precision[i]:>10.2f} {rep.recall[i]:>10.2f} {rep.f1[i]:>10.2f}"
            f" {int(rep.support[i]):>10d} {rep.p_acc[i]:>10.2f}"
        )
    lines.append("")
    lines.append(f"{'accuracy':>{width}} {'':>10} {'':>10} {rep.accuracy:>10.2f} {rep.total:>10d}")
    lines.append(
        f"{'macro avg':>{width}} {rep.macro_precision:>10.2f} {rep.macro_recall:>10.2f}"
        f" {rep.macro_f1:>10.2f} {rep.total:>10d}"
    )
    lines.append("")
    lines.append(ZERO_DIVISION_NOTE)
    return "\n".join(lines) + "\n"


def render_report(rep: ClassificationReport, class_names: Sequence[str]) -> Tuple[str, str]:
    """
    Text and JSON renderings of a report.

    Returns:
        (text table, JSON document)

    Raises:
        ValueError: If the number of class names does not match the report
    """
    return render_text(rep, class_names), json.dumps(report_to_dict(rep, class_names), indent=2) + "\n"


def report_from_json(document: str) -> Tuple[ClassificationReport, List[str]]:
    """Parse a JSON rendering back into a report and its class names."""
    data = json.loads(document)
    classes = data["classes"]

    def column(key, dtype=np.float64):
        return np.array([entry[key] for entry in classes], dtype=dtype)

    rep = ClassificationReport(
        precision=column("precision"),
        recall=column("recall"),
        f1=column("f1"),
        support=column("support", np.int64),
        p_acc=column("p_acc"),
        accuracy=float(data["accuracy"]),
        macro_precision=float(data["macro"]["precision"]),
        macro_recall=float(data["macro"]["recall"]),
        macro_f1=float(data["macro"]["f1"]),
    )
    return rep, [entry["name"] for entry in classes]
