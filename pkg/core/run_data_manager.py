"""Python file/module that handles every file a run writes to its output directory."""
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from omegaconf import DictConfig

from core.config_schema import to_yaml
from core.metrics import ClassificationReport, render_report
from core.trainer import TrainLog
from utilities.general_utils import plot_class_distribution, plot_confusion_matrix, plot_training_curves

RESOLVED_CONFIG = "config.resolved"
REPORT_TEXT = "report.txt"
REPORT_JSON = "report.json"
PREDICTIONS = "predictions.csv"
CONFUSION_PLOT = "confusion_matrix.png"
CURVES_PLOT = "training_curves.png"
DISTRIBUTION_PLOT = "class_distribution.png"
DATA_REPORT = "data_report.csv"
GRADCHECK_TABLE = "gradcheck.csv"
SUMMARY = "summary.txt"

GRADCHECK_COLUMNS = ["component", "max_rel_error", "tolerance", "checked", "skipped", "passed"]


class RunDataManager:
    """
    Manages storage of run artifacts (config echo, reports, predictions, plots and tables).

    Nothing is written outside ``output_dir``.
    """

    def __init__(self, output_dir, logger=None):
        """
        Initialize the data manager with output directory.

        Args:
            output_dir: Directory to store output files
            logger: Optional logger for logging messages
        """
        self.logger = logger or logging.getLogger(__name__)
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.logger.debug(f"Run outputs go to {self.output_dir}")

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def _write_text(self, name: str, text: str) -> Path:
        # Write-then-rename so a crash never leaves a half-written artifact.
        target = self.path(name)
        partial = target.with_name(target.name + ".partial")
        partial.write_text(text)
        os.replace(partial, target)
        return target

    def save_config(self, config: DictConfig) -> Path:
        """Echo the fully resolved configuration before any work starts."""
        path = self._write_text(RESOLVED_CONFIG, to_yaml(config))
        self.logger.info(f"Resolved configuration written to {path}")
        return path

    def save_report(
        self,
        report: ClassificationReport,
        class_names: Sequence[str],
        routing: Optional[Dict[str, dict]] = None,
        extra: Optional[dict] = None,
    ) -> Dict[str, Path]:
        """
        Save the classification report as text and JSON.

        Args:
            report: Report to render
            class_names: Ordered class names
            routing: Optional per-MoE-site routing statistics (stored under ``routing``)
            extra: Optional additional top-level JSON fields (checkpoint, split, loss)
        """
        text, document = render_report(report, class_names)
        if routing or extra:
            data = json.loads(document)
            data.update(extra or {})
            if routing:
                data["routing"] = routing
            document = json.dumps(data, indent=2) + "\n"
        paths = {"text": self._write_text(REPORT_TEXT, text), "json": self._write_text(REPORT_JSON, document)}
        self.logger.info(f"Classification report saved to {paths['text']} and {paths['json']}")
        return paths

    def save_predictions(self, ids: Sequence[str], true: np.ndarray, pred: np.ndarray, probabilities: np.ndarray) -> Path:
        """Per-sample predictions as ``id,true,pred,prob_0..prob_{K-1}``."""
        frame = pd.DataFrame({"id": list(ids), "true": np.asarray(true, dtype=int), "pred": np.asarray(pred, dtype=int)})
        probs = pd.DataFrame(
            np.asarray(probabilities), columns=[f"prob_{k}" for k in range(np.asarray(probabilities).shape[1])]
        )
        frame = pd.concat([frame, probs], axis=1)
        path = self.path(PREDICTIONS)
        frame.to_csv(path, index=False, float_format="%.6f")
        self.logger.info(f"{len(frame)} predictions saved to {path}")
        return path

    def save_confusion_plot(self, cm: np.ndarray, class_names: Sequence[str], title: Optional[str] = None) -> Path:
        return plot_confusion_matrix(cm, class_names, self.path(CONFUSION_PLOT), title=title)

    def save_training_curves(self, log: TrainLog) -> Optional[Path]:
        if not log.records:
            self.logger.warning("No epochs recorded; skipping training curves")
            return None
        return plot_training_curves(log.history(), self.path(CURVES_PLOT))

    def save_class_distribution(self, distribution: pd.DataFrame) -> Dict[str, Path]:
        """Per-class split counts as CSV plus a bar chart."""
        csv_path = self.path(DATA_REPORT)
        distribution.to_csv(csv_path)
        plot_path = plot_class_distribution(distribution, self.path(DISTRIBUTION_PLOT))
        self.logger.info(f"Class distribution saved to {csv_path}")
        return {"csv": csv_path, "plot": plot_path}

    def save_gradcheck_table(self, rows: List[tuple]) -> Path:
        """One row per checked component: name, max relative error, tolerance, counts, pass flag."""
        frame = pd.DataFrame(rows, columns=GRADCHECK_COLUMNS)
        path = self.path(GRADCHECK_TABLE)
        frame.to_csv(path, index=False)
        self.logger.info(f"Gradient-check table saved to {path}")
        return path

    def save_summary(self, text: str) -> Path:
        return self._write_text(SUMMARY, text)

    def get_predictions(self) -> pd.DataFrame:
        """
        Read back the predictions written by ``save_predictions``.

        Returns:
            DataFrame with the id, true, pred and probability columns (empty if none were written)
        """
        try:
            return pd.read_csv(self.path(PREDICTIONS), dtype={"id": str})
        except FileNotFoundError:
            self.logger.error(f"No predictions found in {self.output_dir}")
            return pd.DataFrame(columns=["id", "true", "pred"])
