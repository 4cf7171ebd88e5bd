"""Tests for the assembled model, its loss and the profiles."""
import math

import numpy as np
import pytest

from autodiff.tensor import Tensor, seeded_rng
from model.expressnet import ExpressNetModel, ModelConfig, categorical_crossentropy, count_parameters
from model.moe import MoEConfig
from model.profiles import build_model_config
from utilities.exceptions import ConfigError, ShapeError


def tiny_model(num_classes=3, **overrides) -> ExpressNetModel:
    return ExpressNetModel(build_model_config("grad-check", num_classes=num_classes, **overrides))


def images(batch=2, size=16, seed=0) -> Tensor:
    return Tensor(seeded_rng(seed).random((batch, size, size, 3)).astype(np.float32))


class TestForward:

    @pytest.mark.parametrize("num_classes", [3, 7, 8])
    def test_rows_are_distributions(self, num_classes):
        model = tiny_model(num_classes)
        probs = model.forward(images(4)).data
        assert probs.shape == (4, num_classes)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
        assert (probs >= 0).all()

    def test_train_mode_needs_dropout_source(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.forward(images(), mode="train")
        out = model.forward(images(), mode="train", rng=seeded_rng(3))
        assert out.shape == (2, 3)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            tiny_model().forward(images(), mode="eval")

    def test_wrong_input_size(self):
        with pytest.raises(ShapeError):
            tiny_model().forward(images(size=24))

    def test_inference_is_deterministic(self):
        model = tiny_model()
        x = images(3)
        np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)

    def test_routing_after_forward(self):
        model = tiny_model()
        assert model.routing() == {}
        model.forward(images(5))
        routing = model.routing()
        assert set(routing) == {"moe_a", "moe_b"}
        for stats in routing.values():
            assert stats.selection_frequency.sum() == pytest.approx(2.0)
        assert len(model.selection_signature()) == 2


class TestConstruction:

    def test_same_seed_same_weights(self):
        first = tiny_model().parameter_store().state_dict()
        second = tiny_model().parameter_store().state_dict()
        assert list(first) == list(second)
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    def test_other_seed_other_weights(self):
        first = tiny_model().parameter_store().state_dict()
        second = tiny_model(seed=1).parameter_store().state_dict()
        assert not np.array_equal(first["head/weight"], second["head/weight"])

    def test_parameter_names_are_component_paths(self):
        names = list(tiny_model().parameter_store().parameters)
        assert names[0] == "cnnfe1/stage0/conv/kernel"
        assert "moe_b/gate/weight" in names
        assert "backbone/stage1_block0/projection/kernel" in names
        assert names[-1] == "head/bias"

    def test_count_parameters(self):
        model = tiny_model()
        counts = count_parameters(model)
        assert list(counts) == ["cnnfe1", "cnnfe2", "backbone", "fusion", "moe_a", "moe_b", "head", "total"]
        assert counts["total"] == model.parameter_store().num_parameters()
        assert counts["total"] == sum(row[3] for row in model.summary_rows())
        # 8 + 8 MoE widths into 3 classes
        assert counts["head"] == 16 * 3 + 3

    def test_summary_rows_end_with_head(self):
        rows = tiny_model(num_classes=7).summary_rows(batch=2)
        assert rows[-1][0] == "head"
        assert rows[-1][2] == (2, 7)

    @pytest.mark.parametrize("overrides", [{"num_classes": 1}, {"label_smoothing": 0.5}])
    def test_invalid_config(self, overrides):
        with pytest.raises(ConfigError):
            build_model_config("grad-check", **overrides)

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            build_model_config("huge")

    def test_stage_override_becomes_custom(self):
        config = build_model_config("paper", cnnfe1_kernels=[9, 7, 5, 3, 3, 3])
        assert config.cnnfe1.scale_profile == "custom"
        assert config.cnnfe2.scale_profile == "paper"

    def test_moe_width_must_match_branch(self):
        config = build_model_config("grad-check")
        with pytest.raises(ConfigError):
            ModelConfig(
                cnnfe1=config.cnnfe1, cnnfe2=config.cnnfe2, backbone=config.backbone,
                moe_a=MoEConfig(input_dim=5), moe_b=config.moe_b,
            )

    @pytest.mark.slow
    def test_paper_profile_counts(self):
        model = ExpressNetModel(build_model_config("paper", num_classes=8))
        counts = count_parameters(model)
        assert counts["total"] == sum(row[3] for row in model.summary_rows())
        assert counts["cnnfe1"] > counts["cnnfe2"]


class TestLoss:

    @pytest.mark.parametrize("smoothing", [0.0, 0.1])
    @pytest.mark.parametrize("num_classes", [3, 7])
    def test_uniform_prediction_costs_log_k(self, smoothing, num_classes, float64):
        pred = Tensor(np.full((4, num_classes), 1.0 / num_classes))
        target = np.eye(num_classes)[[0, 1, 2, 0]]
        loss = categorical_crossentropy(pred, target, smoothing)
        assert loss.item() == pytest.approx(math.log(num_classes), abs=1e-7)

    def test_smoothed_loss_by_hand(self, float64):
        pred = Tensor(np.array([[0.94] + [0.01] * 6]))
        target = np.eye(7)[[0]]
        expected = -((0.9 + 0.1 / 7) * math.log(0.94) + 6 * (0.1 / 7) * math.log(0.01))
        assert categorical_crossentropy(pred, target, 0.1).item() == pytest.approx(expected, abs=1e-7)

    def test_class_permutation_leaves_loss_unchanged(self, float64):
        rng = seeded_rng(3)
        logits = rng.normal(size=(5, 7))
        pred = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        target = np.eye(7)[rng.integers(0, 7, size=5)]
        perm = rng.permutation(7)
        loss = categorical_crossentropy(Tensor(pred), target, 0.1).item()
        permuted = categorical_crossentropy(Tensor(pred[:, perm]), target[:, perm], 0.1).item()
        assert permuted == pytest.approx(loss, abs=1e-7)

    def test_zero_probability_is_clamped(self, float64):
        loss = categorical_crossentropy(Tensor(np.array([[0.0, 1.0]])), np.array([[1.0, 0.0]]))
        assert loss.item() == pytest.approx(-math.log(1e-7))

    def test_smoothing_penalizes_confidence(self, float64):
        pred = Tensor(np.array([[0.99, 0.005, 0.005]]))
        target = np.array([[1.0, 0.0, 0.0]])
        assert categorical_crossentropy(pred, target, 0.1).item() > categorical_crossentropy(pred, target).item()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            categorical_crossentropy(Tensor(np.full((2, 3), 1 / 3)), np.eye(4)[:2])

    def test_negative_prediction(self):
        with pytest.raises(ValueError):
            categorical_crossentropy(Tensor(np.array([[-0.1, 1.1]])), np.array([[0.0, 1.0]]))
