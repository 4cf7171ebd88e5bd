"""Tests for Adam, the epoch loop, plateau handling, determinism and resume."""
import math

import numpy as np
import pytest

from autodiff.tensor import Parameter, Tape, Tensor, seeded_rng
from core.trainer import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    TRAIN_LOG,
    AdamState,
    EvaluationResult,
    Trainer,
    TrainConfig,
    adam_step,
    read_train_log,
)
from dataloader.expression_dataset import Batch, BatchGenerator, load_manifest, one_hot
from model.checkpoint import load_checkpoint
from model.expressnet import ExpressNetModel, categorical_crossentropy
from model.parameter_store import ParameterStore
from model.profiles import build_model_config
from tests.conftest import FIXTURE_CLASSES
from utilities.exceptions import ConfigError, DataError, NumericalError


def single_parameter(value) -> ParameterStore:
    return ParameterStore({"theta": Parameter(np.array(value, dtype=np.float64))}, {})


class ListStream:
    """Stream stand-in that replays fixed batches and reports a fixed length."""

    def __init__(self, batches, length):
        self.batches = batches
        self.length = length

    def __len__(self):
        return self.length

    def epoch(self, epoch=0):
        return iter(self.batches)


class ScriptedTrainer(Trainer):
    """Trainer whose validation accuracy follows a script instead of the model."""

    def __init__(self, model, config, accuracies):
        super().__init__(model, config)
        self.accuracies = list(accuracies)

    def train_epoch(self, stream, epoch):
        return 1.0, 0.5

    def evaluate(self, stream, epoch=0):
        return EvaluationResult(
            loss=1.0,
            accuracy=self.accuracies[self.start_epoch],
            ids=["a"],
            true=np.zeros(1, dtype=np.int64),
            pred=np.zeros(1, dtype=np.int64),
            probabilities=np.full((1, 3), 1 / 3),
        )


def tiny_model(num_classes=3, input_size=None) -> ExpressNetModel:
    return ExpressNetModel(build_model_config("grad-check", num_classes=num_classes, input_size=input_size))


def random_batch(n=4, num_classes=3, seed=0) -> Batch:
    rng = seeded_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    return Batch(
        ids=[f"s{i}" for i in range(n)],
        images=rng.random((n, 16, 16, 3)).astype(np.float32),
        labels=one_hot(labels, num_classes),
    )


class TestAdam:

    def test_zero_gradient_leaves_parameters(self):
        store = single_parameter([1.0, -2.0])
        adam_step(store, AdamState(lr=0.1), TrainConfig())
        np.testing.assert_array_equal(store["theta"].data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        store = single_parameter([1.0, 1.0, 1.0])
        store["theta"].grad = np.array([0.5, -3.0, 200.0])
        state = AdamState(lr=0.01)
        adam_step(store, state, TrainConfig())
        np.testing.assert_allclose(store["theta"].data, [0.99, 1.01, 0.99], atol=1e-8)
        assert state.t == 1
        assert (state.v["theta"] >= 0).all()
        assert state.m["theta"].shape == (3,)

    def test_quadratic_decreases(self):
        store = single_parameter([0.3])
        state = AdamState(lr=1e-2)
        config = TrainConfig()
        trace = [0.3]
        for _ in range(100):
            store["theta"].grad = 2.0 * store["theta"].data
            adam_step(store, state, config)
            trace.append(abs(float(store["theta"].data[0])))
        assert all(later < earlier for earlier, later in zip(trace[:21], trace[1:21]))
        assert trace[-1] < 0.1 * 0.3

    def test_single_step_lowers_batch_loss(self, float64):
        decreased = 0
        for trial in range(20):
            model = ExpressNetModel(build_model_config("grad-check", num_classes=3, seed=trial))
            batch = random_batch(seed=100 + trial)
            images = Tensor(batch.images.astype(np.float64))

            def batch_loss():
                probs = model.forward(images, mode="train", rng=seeded_rng((trial, 0)))
                return categorical_crossentropy(probs, batch.labels, model.config.label_smoothing)

            with Tape() as tape:
                before = batch_loss()
            tape.backward(before)
            adam_step(model.parameter_store(), AdamState(lr=1e-4), TrainConfig(lr=1e-4))
            decreased += batch_loss().item() < before.item()
        assert decreased >= 19

    def test_checked_mode_rejects_nan_gradient(self):
        store = single_parameter([1.0])
        store["theta"].grad = np.array([np.nan])
        with pytest.raises(NumericalError):
            adam_step(store, AdamState(lr=0.1), TrainConfig(checked=True))

    def test_state_round_trip(self):
        store = single_parameter([1.0, 2.0])
        store["theta"].grad = np.array([1.0, 1.0])
        state = AdamState(lr=0.01)
        adam_step(store, state, TrainConfig())
        restored = AdamState.from_arrays(state.to_arrays(), store)
        assert restored.t == 1
        assert restored.lr == pytest.approx(0.01)
        np.testing.assert_array_equal(restored.m["theta"], state.m["theta"])

    @pytest.mark.parametrize("overrides", [{"lr": 0.0}, {"beta1": 1.0}, {"epochs": 0}, {"lr_reduce_factor": 1.5}])
    def test_invalid_config(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides)


class TestPlateau:

    def test_reduce_then_stop(self, tmp_path):
        config = TrainConfig(epochs=10, lr=1e-3, lr_reduce_patience=2, early_stop_patience=3)
        trainer = ScriptedTrainer(tiny_model(), config, [0.5, 0.6, 0.6, 0.6, 0.6, 0.7])
        log = trainer.fit(None, None, output_dir=tmp_path)

        assert len(log.records) == 5
        assert log.stopped_early
        assert log.best_epoch == 2
        assert log.best_val_acc == 0.6
        assert log.history()["lr"] == pytest.approx([1e-3, 1e-3, 1e-3, 1e-3, 5e-4])
        entries = read_train_log(tmp_path / TRAIN_LOG)
        assert [entry["epoch"] for entry in entries] == [1, 2, 3, 4, 5]
        assert entries[-1]["best"] == 2
        assert "wall_time" not in entries[0]
        assert (tmp_path / BEST_CHECKPOINT).exists()
        assert (tmp_path / LAST_CHECKPOINT).exists()

    def test_lr_never_below_min(self):
        config = TrainConfig(
            epochs=6, lr=1e-3, min_lr=4e-4, lr_reduce_factor=0.5, lr_reduce_patience=1, early_stop_patience=5
        )
        trainer = ScriptedTrainer(tiny_model(), config, [0.5] + [0.4] * 5)
        log = trainer.fit(None, None)
        assert log.history()["lr"] == pytest.approx([1e-3, 1e-3, 5e-4, 4e-4, 4e-4, 4e-4])
        assert log.stopped_early

    def test_runs_all_epochs_while_improving(self):
        trainer = ScriptedTrainer(tiny_model(), TrainConfig(epochs=3), [0.1, 0.2, 0.3])
        log = trainer.fit(None, None)
        assert len(log.records) == 3
        assert not log.stopped_early
        assert log.best_epoch == 3


class TestTrainingLoop:

    def test_train_step_changes_parameters(self):
        model = tiny_model()
        trainer = Trainer(model, TrainConfig(lr=1e-2))
        before = model.parameter_store().state_dict()
        loss, correct = trainer.train_step(random_batch(), epoch=0, step=0)
        after = model.parameter_store().state_dict()
        assert math.isfinite(loss)
        assert 0 <= correct <= 4
        assert not np.array_equal(before["head/weight"], after["head/weight"])
        assert trainer.state.t == 1

    def test_exhausted_stream(self):
        trainer = Trainer(tiny_model(), TrainConfig())
        with pytest.raises(DataError, match="exhausted"):
            trainer.train_epoch(ListStream([random_batch()], length=3), epoch=0)

    def test_skipped_samples_do_not_hide_exhaustion(self):
        stream = ListStream([random_batch()], length=3)
        stream.skipped = ["s9"]
        with pytest.raises(DataError, match="exhausted"):
            Trainer(tiny_model(), TrainConfig()).train_epoch(stream, epoch=0)

    def test_dropped_batches_count_as_delivered(self):
        stream = ListStream([random_batch()], length=2)
        stream.dropped_batches = 1
        loss, accuracy = Trainer(tiny_model(), TrainConfig()).train_epoch(stream, epoch=0)
        assert math.isfinite(loss)
        assert 0.0 <= accuracy <= 1.0

    def test_evaluate_empty_stream(self):
        trainer = Trainer(tiny_model(), TrainConfig())
        with pytest.raises(DataError):
            trainer.evaluate(ListStream([], length=0))

    def test_evaluate_collects_gate_probabilities(self):
        trainer = Trainer(tiny_model(), TrainConfig())
        result = trainer.evaluate(ListStream([random_batch(3), random_batch(2, seed=1)], length=2))
        assert result.ids == ["s0", "s1", "s2", "s0", "s1"]
        assert result.probabilities.shape == (5, 3)
        assert result.gate_probabilities["moe_a"].shape == (5, 4)
        assert 0.0 <= result.accuracy <= 1.0


class TestReproducibility:

    @pytest.fixture
    def streams(self, fixture_dataset):
        samples = load_manifest(fixture_dataset, "labels.csv", FIXTURE_CLASSES).samples
        train = BatchGenerator(samples, 4, batch_size=8, shuffle=True, seed=0, image_size=48)
        val = BatchGenerator(samples[::4], 4, batch_size=8, image_size=48)
        return train, val

    @staticmethod
    def config(epochs):
        return TrainConfig(epochs=epochs, lr=1e-3, early_stop_patience=10, lr_reduce_patience=10)

    def test_rerun_is_bit_identical(self, streams, tmp_path):
        for run in ("a", "b"):
            Trainer(tiny_model(4, 48), self.config(2)).fit(*streams, output_dir=tmp_path / run)
        for name in (TRAIN_LOG, LAST_CHECKPOINT):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume_matches_uninterrupted_run(self, streams, tmp_path):
        Trainer(tiny_model(4, 48), self.config(2)).fit(*streams, output_dir=tmp_path / "full")

        Trainer(tiny_model(4, 48), self.config(1)).fit(*streams, output_dir=tmp_path / "split")
        resumed = Trainer(tiny_model(4, 48), self.config(2))
        resumed.resume(tmp_path / "split" / LAST_CHECKPOINT)
        assert resumed.start_epoch == 1
        log = resumed.fit(*streams, output_dir=tmp_path / "split")

        assert [record.epoch for record in log.records] == [2]
        assert len(read_train_log(tmp_path / "split" / TRAIN_LOG)) == 2
        full = (tmp_path / "full" / LAST_CHECKPOINT).read_bytes()
        assert (tmp_path / "split" / LAST_CHECKPOINT).read_bytes() == full

    @pytest.mark.slow
    def test_desk_profile_overfits_fixture(self, fixture_dataset, tmp_path):
        samples = load_manifest(fixture_dataset, "labels.csv", FIXTURE_CLASSES).samples
        train = BatchGenerator(samples, 4, batch_size=8, shuffle=True, seed=0, image_size=48)
        val = BatchGenerator(samples, 4, batch_size=8, image_size=48)
        config = TrainConfig(epochs=200, lr=1e-3, early_stop_patience=30, lr_reduce_patience=10)
        model_config = build_model_config("desk", num_classes=4, input_size=48)

        log = Trainer(ExpressNetModel(model_config), config).fit(train, val, output_dir=tmp_path)
        assert log.best_val_acc == 1.0

        restored = ExpressNetModel(model_config)
        load_checkpoint(tmp_path / BEST_CHECKPOINT, restored)
        assert Trainer(restored, config).evaluate(val).accuracy == log.best_val_acc
