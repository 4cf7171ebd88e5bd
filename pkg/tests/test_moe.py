"""Tests for top-k gating, the MoE layer and routing statistics."""
import numpy as np
import pytest

from autodiff import ops
from autodiff.tensor import Tape, Tensor
from model import functional as F
from model.moe import MoEConfig, MoELayer, routing_stats, top_k_mask, top_k_mixture
from utilities.exceptions import ConfigError, ShapeError


@pytest.fixture
def layer(float64, rng):
    return MoELayer("moe", MoEConfig(input_dim=6, num_experts=4, top_k=2), rng)


def reference_output(layer, x, k):
    """Gate, experts and top-k combination computed directly with numpy."""
    h = layer.input_dense(Tensor(x)).data
    probs = F.softmax(layer.gate(Tensor(h))).data
    outputs = np.stack([expert(Tensor(h)).data for expert in layer.experts], axis=1)
    out = np.zeros((x.shape[0], layer.config.expert_dim))
    for row in range(x.shape[0]):
        for e in np.argsort(-probs[row], kind="stable")[:k]:
            out[row] += probs[row, e] * outputs[row, e]
    return out


class TestTopKMask:

    def test_ties_go_to_lower_index(self):
        mask = top_k_mask(np.full((1, 4), 0.25), 2)
        np.testing.assert_array_equal(mask, [[True, True, False, False]])

    def test_exactly_k_per_row(self, rng):
        probs = rng.dirichlet(np.ones(5), size=10)
        assert (top_k_mask(probs, 3).sum(axis=1) == 3).all()

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            top_k_mask(np.full((1, 3), 1 / 3), 4)


class TestMoEConfig:

    def test_expert_dim_defaults_to_input(self):
        assert MoEConfig(input_dim=12).expert_dim == 12

    @pytest.mark.parametrize("top_k", [0, 5])
    def test_top_k_bounds(self, top_k):
        with pytest.raises(ConfigError):
            MoEConfig(input_dim=4, num_experts=4, top_k=top_k)


class TestMoELayer:

    def test_matches_reference(self, layer, rng):
        x = rng.normal(size=(5, 6))
        out = layer(Tensor(x))
        np.testing.assert_allclose(out.data, reference_output(layer, x, 2), atol=1e-12)

    def test_exactly_k_experts_per_sample(self, layer, rng):
        layer(Tensor(rng.normal(size=(7, 6))))
        assert (layer.last_selection.sum(axis=1) == 2).all()
        np.testing.assert_allclose(layer.last_probabilities.sum(axis=1), 1.0)

    def test_k_equal_to_experts_is_soft_mixture(self, layer, rng):
        x = rng.normal(size=(3, 6))
        h = layer.input_dense(Tensor(x)).data
        probs = F.softmax(layer.gate(Tensor(h))).data
        soft = sum(probs[:, e:e + 1] * expert(Tensor(h)).data for e, expert in enumerate(layer.experts))
        np.testing.assert_allclose(layer(Tensor(x), k=4).data, soft, atol=1e-12)

    def test_k_equal_to_experts_matches_soft_mixture_gradients(self, layer, rng):
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        projection = Tensor(rng.normal(size=(3, 6)))
        # row e of selectors[e] is ones: probs @ selectors[e] repeats column e across the width
        selectors = [np.outer(np.eye(4)[e], np.ones(6)) for e in range(4)]
        tensors = [x] + [p for _, p in layer.parameters()]

        def gradients(forward):
            for tensor in tensors:
                tensor.zero_grad()
            with Tape() as tape:
                loss = ops.sum(ops.mul(forward(), projection))
            tape.backward(loss)
            return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

        def soft_mixture():
            h = layer.input_dense(x)
            probs = F.softmax(layer.gate(h))
            out = None
            for e, expert in enumerate(layer.experts):
                term = ops.mul(ops.matmul(probs, Tensor(selectors[e])), expert(h))
                out = term if out is None else ops.add(out, term)
            return out

        for hard, soft in zip(gradients(lambda: layer(x, k=4)), gradients(soft_mixture)):
            np.testing.assert_allclose(hard, soft, atol=1e-10)

    def test_forced_gate_selects_first_expert(self, layer, rng):
        layer.gate.weight.data = np.zeros_like(layer.gate.weight.data)
        layer.gate.bias.data = np.array([50.0, -50.0, -50.0, -50.0])
        x = rng.normal(size=(3, 6))
        out = layer(Tensor(x), k=1)
        assert layer.last_selection[:, 0].all()
        assert layer.last_selection.sum() == 3
        h = layer.input_dense(Tensor(x))
        np.testing.assert_allclose(out.data, layer.experts[0](h).data, atol=1e-12)

    def test_unselected_expert_output_does_not_matter(self, layer, rng):
        x = Tensor(rng.normal(size=(1, 6)))
        before = layer(x).data.copy()
        unused = int(np.flatnonzero(~layer.last_selection[0])[0])
        layer.experts[unused].weight.data = np.zeros_like(layer.experts[unused].weight.data)
        layer.experts[unused].bias.data = np.zeros_like(layer.experts[unused].bias.data)
        np.testing.assert_array_equal(layer(x).data, before)

    def test_invariant_to_expert_permutation(self, layer, rng):
        x = rng.normal(size=(4, 6))
        before = layer(Tensor(x)).data.copy()
        perm = [2, 0, 3, 1]
        layer.experts = [layer.experts[e] for e in perm]
        layer.gate.weight.data = layer.gate.weight.data[:, perm].copy()
        layer.gate.bias.data = layer.gate.bias.data[perm].copy()
        np.testing.assert_allclose(layer(Tensor(x)).data, before, atol=1e-12)

    def test_unselected_experts_get_no_gradient(self, layer, rng):
        x = Tensor(rng.normal(size=(1, 6)))
        with Tape() as tape:
            loss = ops.sum(layer(x, k=1))
        tape.backward(loss)
        chosen = int(np.argmax(layer.last_probabilities[0]))
        for e, expert in enumerate(layer.experts):
            if e == chosen:
                continue
            assert not np.any(expert.weight.grad)
            assert not np.any(expert.bias.grad)

    def test_renormalized_weights_sum_to_one(self, rng, float64):
        probs = Tensor(np.array([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]]))
        outputs = [Tensor(np.full((2, 1), 1.0)) for _ in range(3)]
        out = top_k_mixture(probs, outputs, 2, renormalize=True)
        np.testing.assert_allclose(out.data, np.ones((2, 1)))
        plain = top_k_mixture(probs, outputs, 2, renormalize=False)
        np.testing.assert_allclose(plain.data[:, 0], [0.8, 0.9])

    def test_wrong_input_width(self, layer):
        with pytest.raises(ShapeError):
            layer(Tensor(np.ones((2, 5))))

    def test_parameter_count(self, layer):
        # input 6x6+6, four experts 6x6+6, gate 6x4+4
        assert layer.num_parameters() == 42 + 4 * 42 + 28


class TestRoutingStats:

    def test_frequencies_sum_to_k(self, rng):
        probs = rng.dirichlet(np.ones(4), size=20)
        stats = routing_stats(probs, 2)
        assert stats.selection_frequency.sum() == pytest.approx(2.0)
        np.testing.assert_allclose(stats.mean_probability, probs.mean(axis=0))
        assert (stats.selected_mass <= 1.0 + 1e-12).all()

    def test_to_dict(self):
        stats = routing_stats(np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]]), 1).to_dict()
        assert stats["selection_frequency"] == [0.5, 0.5, 0.0]
        assert stats["mean_selected_mass"] == pytest.approx(0.65)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            routing_stats(np.ones((2, 3)), 1)

    def test_uniform_gate(self):
        stats = routing_stats(np.full((3, 4), 0.25), 2)
        np.testing.assert_allclose(stats.selected_mass, 0.5)
        np.testing.assert_array_equal(stats.selection_frequency, [1.0, 1.0, 0.0, 0.0])

    def test_one_hot_gate(self):
        probs = np.eye(4)[[0, 2, 2, 3]]
        stats = routing_stats(probs, 1)
        np.testing.assert_allclose(stats.selected_mass, 1.0)
        np.testing.assert_allclose(stats.selection_frequency, [0.25, 0.0, 0.5, 0.25])

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_selected_mass_bounds(self, rng, k):
        stats = routing_stats(rng.dirichlet(np.ones(4), size=50), k)
        assert (stats.selected_mass >= k / 4 - 1e-12).all()
        assert (stats.selected_mass <= 1.0 + 1e-12).all()
