"""Python file that has the system that handles training, evaluation, verification and dataset tooling."""
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import pandas as pd
from omegaconf import DictConfig

from core.emotion_schema import resolve_class_names
from core.metrics import ClassificationReport, confusion, report
from core.run_data_manager import RunDataManager
from core.trainer import BEST_CHECKPOINT, EvaluationResult, Trainer, TrainConfig, TrainLog
from core.verification import SuiteRow, SuiteSettings, raise_on_failure, run_suite, summary_table
from dataloader.expression_dataset import (
    ON_ERROR,
    SPLITS,
    BatchGenerator,
    DatasetManifest,
    carve_validation,
    load_manifest,
    stratified_split,
)
from dataloader.synthetic import make_fixture
from model.checkpoint import load_checkpoint
from model.expressnet import ExpressNetModel, ModelConfig, count_parameters
from model.moe import routing_stats
from model.profiles import build_model_config
from utilities.exceptions import ConfigError, DataError

VALIDATION_SOURCES = ("carve", "test", "train")


def _optional_list(value):
    return None if value is None else list(value)


class ExpressionRecognitionSystem:
    """
    Main system that orchestrates data preparation, model construction, training and reporting.
    """

    def __init__(self, config: DictConfig, logger=None):
        """
        Initialize the system and run the semantic configuration checks.

        Args:
            config: Resolved run configuration (see ``core.config_schema``)
            logger: Optional logger for logging messages
        """
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self._validate()
        self.class_names = resolve_class_names(
            config.model.num_classes,
            preset=config.data.preset,
            classes=_optional_list(config.data.classes),
        )
        self.model_config = self._model_config()
        self.data_manager = RunDataManager(config.out, logger=self.logger)
        self.logger.debug(f"Classes: {self.class_names}")

    def _validate(self) -> None:
        data = self.config.data
        if data.on_error not in ON_ERROR:
            raise ConfigError(f"data.on_error must be one of {ON_ERROR}, got '{data.on_error}'")
        if data.validation not in VALIDATION_SOURCES:
            raise ConfigError(f"data.validation must be one of {VALIDATION_SOURCES}, got '{data.validation}'")
        for key in ("test_fraction", "val_fraction"):
            if not 0.0 < data[key] < 1.0:
                raise ConfigError(f"data.{key} must be in (0, 1), got {data[key]}")
        if data.batch_size < 1 or data.prefetch < 0:
            raise ConfigError("data.batch_size must be >= 1 and data.prefetch >= 0")
        if self.config.eval.split not in SPLITS:
            raise ConfigError(f"eval.split must be one of {SPLITS}, got '{self.config.eval.split}'")

    def _model_config(self) -> ModelConfig:
        model, moe = self.config.model, self.config.moe
        return build_model_config(
            profile=model.profile,
            num_classes=model.num_classes,
            label_smoothing=model.label_smoothing,
            num_experts=moe.num_experts,
            top_k=moe.top_k,
            expert_dim=moe.expert_dim,
            renormalize=moe.renormalize,
            conv_dropout=model.conv_dropout,
            head_dropout=model.head_dropout,
            cnnfe1_kernels=_optional_list(model.cnnfe1_kernels),
            cnnfe1_filters=_optional_list(model.cnnfe1_filters),
            cnnfe2_kernels=_optional_list(model.cnnfe2_kernels),
            cnnfe2_filters=_optional_list(model.cnnfe2_filters),
            backbone_blocks=_optional_list(model.backbone_blocks),
            backbone_base_filters=model.backbone_base_filters,
            input_size=model.input_size,
            seed=model.seed,
            class_names=self.class_names,
        )

    def build_model(self) -> ExpressNetModel:
        return ExpressNetModel(self.model_config, logger=self.logger)

    def train_config(self) -> TrainConfig:
        training = self.config.training
        return TrainConfig(
            epochs=training.epochs,
            batch_size=training.batch_size,
            lr=training.lr,
            beta1=training.beta1,
            beta2=training.beta2,
            adam_epsilon=training.adam_epsilon,
            lr_reduce_factor=training.lr_reduce_factor,
            lr_reduce_patience=training.lr_reduce_patience,
            min_lr=training.min_lr,
            early_stop_patience=training.early_stop_patience,
            seed=training.seed,
            checked=training.checked,
        )

    def load_data(self) -> DatasetManifest:
        """
        Load the manifest and assign train/val/test splits.

        A ``split`` column in the manifest is used as is; otherwise a stratified
        split is drawn with ``data.seed``. With ``data.validation = carve`` a
        stratified ``val_fraction`` of train becomes the validation split.
        """
        data = self.config.data
        manifest = load_manifest(data.root, data.labels, self.class_names, logger=self.logger)
        if manifest.has_split():
            self.logger.info("Using the split column of the manifest")
        else:
            manifest = stratified_split(manifest, data.test_fraction, data.seed)
        if data.validation == "carve":
            manifest = carve_validation(manifest, data.val_fraction, data.seed)
        counts = {name: len(manifest.split(name)) for name in SPLITS}
        self.logger.info(f"Split sizes: {counts}")
        return manifest

    def stream(self, manifest: DatasetManifest, split: str, shuffle: bool = False) -> BatchGenerator:
        samples = manifest.split(split)
        if not samples:
            raise DataError(f"The {split} split is empty")
        data = self.config.data
        return BatchGenerator(
            samples,
            manifest.num_classes,
            batch_size=data.batch_size,
            shuffle=shuffle,
            seed=data.seed,
            image_size=self.model_config.input_size,
            on_error=data.on_error,
            prefetch=data.prefetch,
            logger=self.logger,
        )

    def validation_split(self) -> str:
        return {"carve": "val", "test": "test", "train": "train"}[self.config.data.validation]

    def train(self) -> TrainLog:
        """
        Train a model on the configured dataset.

        Writes ``train_log.jsonl``, ``best.ckpt``, ``last.ckpt`` and (optionally)
        ``training_curves.png`` to the output directory.
        """
        manifest = self.load_data()
        train_stream = self.stream(manifest, "train", shuffle=True)
        val_stream = self.stream(manifest, self.validation_split())

        model = self.build_model()
        trainer = Trainer(model, self.train_config(), logger=self.logger)
        if self.config.training.resume_from:
            trainer.resume(self.config.training.resume_from)

        log = trainer.fit(train_stream, val_stream, output_dir=self.data_manager.output_dir)
        if self.config.training.plot_curves:
            self.data_manager.save_training_curves(log)
        self.logger.info(
            f"Training finished: best validation accuracy {log.best_val_acc:.4f} at epoch {log.best_epoch}"
        )
        return log

    def evaluate(self, checkpoint: Optional[str] = None, split: Optional[str] = None) -> Tuple[EvaluationResult, ClassificationReport]:
        """
        Evaluate a checkpoint and write the report, predictions, confusion plot and routing statistics.

        Args:
            checkpoint: Checkpoint path; defaults to ``eval.checkpoint`` then ``<out>/best.ckpt``
            split: Split to evaluate; defaults to ``eval.split``

        Returns:
            (evaluation result, classification report)
        """
        checkpoint = Path(checkpoint or self.config.eval.checkpoint or self.data_manager.path(BEST_CHECKPOINT))
        split = split or self.config.eval.split
        model = self.build_model()
        load_checkpoint(checkpoint, model)
        self.logger.info(f"Evaluating {checkpoint} on the {split} split")

        manifest = self.load_data()
        trainer = Trainer(model, self.train_config(), logger=self.logger)
        result = trainer.evaluate(self.stream(manifest, split))

        cm = confusion(result.true, result.pred, self.model_config.num_classes)
        rep = report(cm)
        routing = {}
        for name, probs in result.gate_probabilities.items():
            stats = routing_stats(probs, self.model_config.moe_a.top_k).to_dict()
            routing[name] = stats
            self.logger.info(f"{name} routing: selection frequency {stats['selection_frequency']}")
        self.data_manager.save_report(
            rep, self.class_names, routing=routing,
            extra={"checkpoint": str(checkpoint), "split": split, "loss": round(result.loss, 6)},
        )
        self.data_manager.save_predictions(result.ids, result.true, result.pred, result.probabilities)
        self.data_manager.save_confusion_plot(cm, self.class_names, title=f"{split} accuracy {rep.accuracy:.4f}")
        self.logger.info(f"Accuracy {result.accuracy:.4f} over {len(result.ids)} samples")
        return result, rep

    def gradcheck(self) -> List[SuiteRow]:
        """
        Run the finite-difference suite and write ``gradcheck.csv``.

        Raises:
            GradCheckError: If any component exceeds its tolerance
        """
        settings = self.config.gradcheck
        rows = run_suite(
            SuiteSettings(
                step=settings.step,
                layer_tolerance=settings.layer_tolerance,
                model_tolerance=settings.model_tolerance,
                max_entries=settings.max_entries,
                batch_size=settings.batch_size,
                seed=settings.seed,
                corrupt_op=settings.corrupt_op,
            ),
            logger=self.logger,
        )
        self.data_manager.save_gradcheck_table(summary_table(rows))
        raise_on_failure(rows)
        return rows

    def summary(self) -> str:
        """Layer-by-layer table per branch, branch subtotals and the grand total."""
        model = self.build_model()
        rows = model.summary_rows()
        frame = pd.DataFrame(
            [(name, kind, "×".join(str(extent) for extent in shape[1:]), params) for name, kind, shape, params in rows],
            columns=["layer", "type", "output", "params"],
        )
        counts = count_parameters(model)

        width = max(len(name) for name in counts) + 2
        lines = [
            f"ExpressNet-MoE ({self.model_config.profile} profile, {self.model_config.num_classes} classes, "
            f"input {self.model_config.input_size}×{self.model_config.input_size}×3)",
            "",
            frame.to_string(index=False),
            "",
        ]
        lines += [f"{name:<{width}}{count:>14d}" for name, count in counts.items()]
        text = "\n".join(lines) + "\n"
        self.data_manager.save_summary(text)
        return text

    def validate_data(self) -> pd.DataFrame:
        """Load and split the dataset and write the per-class distribution."""
        manifest = self.load_data()
        distribution = manifest.class_distribution()
        self.data_manager.save_class_distribution(distribution)
        if manifest.warnings:
            self.logger.warning(f"{len(manifest.warnings)} manifest rows reference missing files")
        return distribution

    def make_fixture(self) -> Path:
        fixture = self.config.fixture
        out = Path(fixture.out) if fixture.out else self.data_manager.path("fixture")
        labels = make_fixture(
            out,
            self.class_names,
            samples_per_class=fixture.samples_per_class,
            size=fixture.size,
            seed=fixture.seed,
            grayscale=fixture.grayscale,
            with_bbox=fixture.with_bbox,
            test_fraction=fixture.test_fraction,
            logger=self.logger,
        )
        self.logger.info(f"Synthetic dataset written to {out} ({labels.name})")
        return labels
