"""Python module with the training loop: Adam, plateau learning-rate reduction, early stopping and checkpoints."""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np

from autodiff.tensor import Tape, Tensor, checked_mode, seeded_rng
from model.checkpoint import load_checkpoint, save_checkpoint
from model.expressnet import ExpressNetModel, categorical_crossentropy
from model.parameter_store import ParameterStore
from utilities.exceptions import CheckpointError, ConfigError, DataError, NumericalError, ShapeError

TRAIN_LOG = "train_log.jsonl"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    lr_reduce_factor: float = 0.5
    lr_reduce_patience: int = 2
    min_lr: float = 1e-7
    early_stop_patience: int = 3
    seed: int = 0
    checked: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("training.epochs and training.batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"training.lr must be > 0, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("training.beta1 and training.beta2 must lie in (0, 1)")
        if not self.adam_epsilon > 0:
            raise ConfigError("training.adam_epsilon must be > 0")
        if not 0 < self.lr_reduce_factor < 1:
            raise ConfigError("training.lr_reduce_factor must lie in (0, 1)")
        if self.lr_reduce_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("Patience values must be >= 1")


@dataclass
class AdamState:
    """First/second moments per parameter name, the step counter and the current learning rate."""
    lr: float
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {"step": np.array([self.t]), "lr": np.array([self.lr])}
        arrays.update((f"m/{name}", moment) for name, moment in self.m.items())
        arrays.update((f"v/{name}", moment) for name, moment in self.v.items())
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], store: ParameterStore) -> "AdamState":
        """Rebuild the state saved by ``to_arrays``; moments are cast to each parameter's dtype."""
        if "step" not in arrays or "lr" not in arrays:
            raise CheckpointError("Checkpoint holds no optimizer state")
        state = cls(lr=float(arrays["lr"].reshape(-1)[0]), t=int(arrays["step"].reshape(-1)[0]))
        for name, param in store:
            for key, moments in (("m", state.m), ("v", state.v)):
                stored = arrays.get(f"{key}/{name}")
                if stored is None:
                    continue
                if stored.shape != param.shape:
                    raise CheckpointError(f"Optimizer moment '{key}/{name}' has shape {stored.shape}, expected {param.shape}")
                moments[name] = stored.astype(param.dtype)
        return state


def adam_step(store: ParameterStore, state: AdamState, config: TrainConfig) -> None:
    """
    One Adam update of every parameter in ``store`` from its ``grad`` (missing grads count as zero).

    The learning rate is cast to each parameter's dtype before use.
    """
    state.t += 1
    bias1 = 1.0 - config.beta1 ** state.t
    bias2 = 1.0 - config.beta2 ** state.t
    for name, param in store:
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient of '{name}' has shape {grad.shape}, expected {param.shape}")
        if config.checked and not np.all(np.isfinite(grad)):
            raise NumericalError(f"Non-finite gradient for '{name}' at optimizer step {state.t}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * grad
        v *= config.beta2
        v += (1.0 - config.beta2) * (grad * grad)
        lr = np.asarray(state.lr, dtype=param.dtype)
        param.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + config.adam_epsilon)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    best: int  # epoch with the highest validation accuracy so far
    wall_time: float = 0.0

    def to_json(self) -> str:
        # wall_time stays out of the persisted log so reruns are byte-identical.
        record = asdict(self)
        record.pop("wall_time")
        return json.dumps(record)


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -math.inf
    best_checkpoint: Optional[Path] = None
    stopped_early: bool = False

    def history(self) -> Dict[str, List[float]]:
        keys = ("train_loss", "train_acc", "val_loss", "val_acc", "lr")
        return {key: [getattr(record, key) for record in self.records] for key in keys}


@dataclass
class EvaluationResult:
    loss: float
    accuracy: float
    ids: List[str]
    true: np.ndarray
    pred: np.ndarray
    probabilities: np.ndarray
    gate_probabilities: Dict[str, np.ndarray] = field(default_factory=dict)


class Trainer:
    """
    Owns one model and its optimizer state for a training run.

    Streams are objects with ``epoch(index)`` returning an iterable of batches and
    ``__len__`` giving the expected batch count (see ``BatchGenerator``).

    Args:
        model: Model to train
        config: Training hyperparameters
        logger: Optional logger
    """

    def __init__(self, model: ExpressNetModel, config: TrainConfig, logger=None):
        self.model = model
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self.store = model.parameter_store()
        self.state = AdamState(lr=config.lr)
        self.start_epoch = 0
        self.best_val_acc = -math.inf
        self.best_epoch = 0
        self.wait = 0

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.store))[1].dtype

    def _inputs(self, images: np.ndarray) -> Tensor:
        return Tensor(np.asarray(images, dtype=self.dtype))

    def train_step(self, batch, epoch: int, step: int) -> tuple:
        """
        Forward, backward and Adam update on one batch.

        Dropout masks come from a stream seeded by ``(seed, epoch, step)``.

        Returns:
            (batch loss, number of correct train-mode predictions)
        """
        rng = seeded_rng((self.config.seed, epoch, step))
        self.store.zero_grad()
        with checked_mode(self.config.checked):
            with Tape() as tape:
                probs = self.model.forward(self._inputs(batch.images), mode="train", rng=rng)
                loss = categorical_crossentropy(probs, batch.labels, self.model.config.label_smoothing)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise NumericalError(f"Non-finite training loss at epoch {epoch + 1}, step {step + 1}")
            tape.backward(loss)
            adam_step(self.store, self.state, self.config)
        correct = int((probs.data.argmax(axis=1) == batch.labels.argmax(axis=1)).sum())
        self.logger.debug(f"epoch {epoch + 1} step {step + 1}: loss {loss_value:.6f}")
        return loss_value, correct

    def train_epoch(self, stream, epoch: int) -> tuple:
        """Run every batch of one epoch; returns (mean loss, accuracy)."""
        expected = len(stream)
        total_loss, correct, seen, steps = 0.0, 0, 0, 0
        for step, batch in enumerate(stream.epoch(epoch)):
            loss, hits = self.train_step(batch, epoch, step)
            total_loss += loss * len(batch)
            correct += hits
            seen += len(batch)
            steps += 1
        # Batches whose every sample was skipped count as delivered.
        if steps + getattr(stream, "dropped_batches", 0) < expected:
            raise DataError(f"Training stream exhausted at epoch {epoch + 1} after {steps} of {expected} steps")
        if seen == 0:
            raise DataError(f"Training stream yielded no samples in epoch {epoch + 1}")
        return total_loss / seen, correct / seen

    def evaluate(self, stream, epoch: int = 0) -> EvaluationResult:
        """
        Infer-mode pass over a stream.

        Raises:
            DataError: If the stream yields no samples
        """
        ids, true, probabilities = [], [], []
        gates: Dict[str, List[np.ndarray]] = {"moe_a": [], "moe_b": []}
        total_loss = 0.0
        smoothing = self.model.config.label_smoothing
        for batch in stream.epoch(epoch):
            probs = self.model.forward(self._inputs(batch.images), mode="infer")
            total_loss += float(categorical_crossentropy(probs, batch.labels, smoothing).data) * len(batch)
            ids.extend(batch.ids)
            true.append(batch.label_indices)
            probabilities.append(probs.data.astype(np.float64))
            for name, layer in (("moe_a", self.model.moe_a), ("moe_b", self.model.moe_b)):
                gates[name].append(layer.last_probabilities)
        if not ids:
            raise DataError("Cannot evaluate an empty stream")
        probabilities = np.concatenate(probabilities)
        true = np.concatenate(true)
        pred = probabilities.argmax(axis=1)
        return EvaluationResult(
            loss=total_loss / len(ids),
            accuracy=float((pred == true).sum()) / len(ids),
            ids=ids,
            true=true,
            pred=pred,
            probabilities=probabilities,
            gate_probabilities={name: np.concatenate(chunks) for name, chunks in gates.items()},
        )

    def checkpoint_state(self) -> Dict[str, np.ndarray]:
        state = self.state.to_arrays()
        state.update({
            "epoch": np.array([self.start_epoch]),
            "best_epoch": np.array([self.best_epoch]),
            "best_val_acc": np.array([self.best_val_acc if math.isfinite(self.best_val_acc) else -1.0]),
            "wait": np.array([self.wait]),
        })
        return state

    def save(self, path) -> Path:
        return save_checkpoint(self.model, path, self.checkpoint_state())

    def resume(self, path) -> None:
        """Restore parameters, BN statistics, optimizer state and the epoch counters from a checkpoint."""
        arrays = load_checkpoint(path, self.model)
        self.state = AdamState.from_arrays(arrays, self.store)
        self.start_epoch = int(arrays.get("epoch", np.zeros(1))[0])
        self.best_epoch = int(arrays.get("best_epoch", np.zeros(1))[0])
        best = float(arrays.get("best_val_acc", np.array([-1.0]))[0])
        self.best_val_acc = best if best >= 0 else -math.inf
        self.wait = int(arrays.get("wait", np.zeros(1))[0])
        self.logger.info(f"Resumed from {path} at epoch {self.start_epoch} (optimizer step {self.state.t})")

    def fit(self, train_stream, val_stream, output_dir=None) -> TrainLog:
        """
        Train until ``epochs`` is reached or validation accuracy stops improving.

        After each epoch: the best checkpoint is written only on a strict
        improvement in validation accuracy; after every ``lr_reduce_patience``
        epochs without improvement the learning rate is multiplied by
        ``lr_reduce_factor`` (never below ``min_lr``); training stops after
        ``early_stop_patience`` epochs without improvement.

        Args:
            train_stream: Training batches
            val_stream: Validation batches
            output_dir: Where ``train_log.jsonl``, ``best.ckpt`` and ``last.ckpt`` go (nothing is written if None)

        Returns:
            TrainLog
        """
        config = self.config
        log = TrainLog(best_epoch=self.best_epoch, best_val_acc=self.best_val_acc)
        log_path = None
        if output_dir is not None:
            output_dir = Path(output_dir)
            output_dir.mkdir(parents=True, exist_ok=True)
            log_path = output_dir / TRAIN_LOG
            if self.start_epoch == 0:
                log_path.write_text("")
            if self.best_epoch:
                log.best_checkpoint = output_dir / BEST_CHECKPOINT

        for epoch in range(self.start_epoch, config.epochs):
            started = time.perf_counter()
            train_loss, train_acc = self.train_epoch(train_stream, epoch)
            result = self.evaluate(val_stream)
            lr_used = self.state.lr

            improved = result.accuracy > self.best_val_acc
            if improved:
                self.best_val_acc = result.accuracy
                self.best_epoch = epoch + 1
                self.wait = 0
            else:
                self.wait += 1
                if self.wait % config.lr_reduce_patience == 0:
                    reduced = max(self.state.lr * config.lr_reduce_factor, config.min_lr)
                    if reduced < self.state.lr:
                        self.logger.info(f"Validation accuracy flat for {self.wait} epochs; lr {self.state.lr:.3g} -> {reduced:.3g}")
                    self.state.lr = reduced
            self.start_epoch = epoch + 1

            record = EpochRecord(
                epoch=epoch + 1,
                train_loss=train_loss,
                train_acc=train_acc,
                val_loss=result.loss,
                val_acc=result.accuracy,
                lr=lr_used,
                best=self.best_epoch,
                wall_time=time.perf_counter() - started,
            )
            log.records.append(record)
            log.best_epoch, log.best_val_acc = self.best_epoch, self.best_val_acc
            self.logger.info(
                f"Epoch {record.epoch}/{config.epochs}: loss {train_loss:.4f}, acc {train_acc:.4f}, "
                f"val_loss {result.loss:.4f}, val_acc {result.accuracy:.4f}, lr {lr_used:.3g} ({record.wall_time:.1f}s)"
            )

            if output_dir is not None:
                with open(log_path, "a") as f:
                    f.write(record.to_json() + "\n")
                if improved:
                    log.best_checkpoint = self.save(output_dir / BEST_CHECKPOINT)
                self.save(output_dir / LAST_CHECKPOINT)

            if self.wait >= config.early_stop_patience:
                log.stopped_early = True
                self.logger.info(f"Early stopping after epoch {epoch + 1}; best epoch {self.best_epoch}")
                break
        return log


def read_train_log(path) -> List[dict]:
    """Parse a ``train_log.jsonl`` file."""
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
