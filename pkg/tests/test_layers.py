"""Tests for the layer operations and layer classes."""
import numpy as np
import pytest
import torch

from autodiff import ops
from autodiff.tensor import Parameter, Tape, Tensor, seeded_rng
from model import functional as F
from model.layers import BatchNorm, Conv2D, Dense, ResidualBlock, Sequential, MaxPool2D
from utilities.exceptions import ShapeError


def conv2d_loops(x, kernel, bias, stride, top, left, out_h, out_w):
    """Brute-force cross-correlation on a zero-padded input."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    padded = np.zeros((n, h + kh + stride * out_h, w + kw + stride * out_w, cin))
    padded[:, top:top + h, left:left + w] = x
    out = np.zeros((n, out_h, out_w, cout))
    for b in range(n):
        for i in range(out_h):
            for j in range(out_w):
                patch = padded[b, i * stride:i * stride + kh, j * stride:j * stride + kw]
                for c in range(cout):
                    out[b, i, j, c] = (patch * kernel[..., c]).sum() + bias[c]
    return out


class TestConv2D:

    def test_matches_torch_same_padding(self, float64, rng):
        x = rng.normal(size=(2, 7, 7, 3))
        kernel = rng.normal(size=(5, 5, 3, 4))
        bias = rng.normal(size=4)
        out = F.conv2d(Tensor(x), Tensor(kernel), Tensor(bias), padding="same")
        expected = torch.nn.functional.conv2d(
            torch.from_numpy(x).permute(0, 3, 1, 2),
            torch.from_numpy(kernel).permute(3, 2, 0, 1),
            torch.from_numpy(bias),
            padding=2,
        ).permute(0, 2, 3, 1).numpy()
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_matches_torch_valid_stride(self, float64, rng):
        x = rng.normal(size=(1, 9, 9, 2))
        kernel = rng.normal(size=(3, 3, 2, 2))
        bias = np.zeros(2)
        out = F.conv2d(Tensor(x), Tensor(kernel), Tensor(bias), stride=(2, 2), padding="valid")
        expected = torch.nn.functional.conv2d(
            torch.from_numpy(x).permute(0, 3, 1, 2),
            torch.from_numpy(kernel).permute(3, 2, 0, 1),
            stride=2,
        ).permute(0, 2, 3, 1).numpy()
        assert out.shape == (1, 4, 4, 2)
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_even_kernel_pads_after(self, float64, rng):
        # Kernel 4 on extent 6: total pad 3, one before and two after.
        x = rng.normal(size=(1, 6, 6, 1))
        kernel = rng.normal(size=(4, 4, 1, 2))
        bias = rng.normal(size=2)
        out = F.conv2d(Tensor(x), Tensor(kernel), Tensor(bias), padding="same")
        expected = conv2d_loops(x, kernel, bias, 1, 1, 1, 6, 6)
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_strided_same_output_size(self):
        assert F.conv_output_size(224, 7, 2, "same") == 112
        assert F.conv_output_size(15, 3, 2, "same") == 8
        assert F.conv_output_size(10, 3, 1, "valid") == 8

    def test_valid_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            F.conv_output_size(3, 5, 1, "valid")

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            F.conv2d(Tensor(rng.normal(size=(1, 4, 4, 2))), Tensor(rng.normal(size=(3, 3, 3, 1))))

    def test_layer_output_shape_and_describe(self, rng):
        layer = Conv2D("conv", 3, 8, 75, rng)
        assert layer.output_shape((1, 224, 224, 3)) == (1, 224, 224, 8)
        assert layer.num_parameters() == 75 * 75 * 3 * 8 + 8
        assert layer.describe() == "conv 75x75, 8 filters, relu"


class TestActivations:

    def test_relu_gradient_zero_at_zero(self, float64):
        x = Parameter(np.array([-1.0, 0.0, 2.0]))
        with Tape() as tape:
            loss = ops.sum(F.relu(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_softmax_rows_sum_to_one(self, rng):
        z = Tensor(rng.normal(size=(5, 7)) * 50)
        probs = F.softmax(z).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert (probs >= 0).all()

    def test_softmax_shift_invariant(self, float64, rng):
        z = rng.normal(size=(2, 4))
        np.testing.assert_allclose(F.softmax(Tensor(z)).data, F.softmax(Tensor(z + 100.0)).data, atol=1e-12)

    def test_dense_unknown_activation(self, rng):
        with pytest.raises(ValueError):
            F.dense(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)), "tanh")


class TestBatchNorm:

    def test_train_mode_normalizes(self, float64, rng):
        x = Tensor(rng.normal(3.0, 5.0, size=(8, 6, 6, 4)))
        layer = BatchNorm("bn", 4)
        out = layer(x, training=True).data
        mean = out.mean(axis=(0, 1, 2))
        var = out.var(axis=(0, 1, 2))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1.0).max() < 1e-3

    def test_running_statistics_update(self, float64, rng):
        x = rng.normal(2.0, 3.0, size=(16, 4))
        layer = BatchNorm("bn", 4, momentum=0.01)
        layer(Tensor(x), training=True)
        np.testing.assert_allclose(layer.running_mean.data, 0.01 * x.mean(axis=0))
        np.testing.assert_allclose(layer.running_var.data, 0.99 + 0.01 * x.var(axis=0))

    def test_infer_mode_uses_running_stats(self, float64, rng):
        layer = BatchNorm("bn", 2)
        layer.running_mean.data[...] = [1.0, -1.0]
        layer.running_var.data[...] = [4.0, 9.0]
        x = rng.normal(size=(3, 2))
        out = layer(Tensor(x), training=False).data
        expected = (x - [1.0, -1.0]) / np.sqrt(np.array([4.0, 9.0]) + 1e-3)
        np.testing.assert_allclose(out, expected)
        np.testing.assert_array_equal(layer.running_mean.data, [1.0, -1.0])

    def test_single_value_per_channel_rejected(self):
        with pytest.raises(ShapeError):
            BatchNorm("bn", 3)(Tensor(np.ones((1, 3))), training=True)


class TestPooling:

    def test_maxpool_values_and_crop(self, float64):
        x = np.arange(25, dtype=np.float64).reshape(1, 5, 5, 1)
        out = F.maxpool2d(Tensor(x)).data
        np.testing.assert_array_equal(out[0, :, :, 0], [[6.0, 8.0], [16.0, 18.0]])

    def test_maxpool_gradient_to_first_maximum(self, float64):
        x = Parameter(np.ones((1, 2, 2, 1)))
        with Tape() as tape:
            loss = ops.sum(F.maxpool2d(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_maxpool_too_small(self):
        with pytest.raises(ShapeError):
            MaxPool2D("pool").output_shape((1, 1, 4, 3))

    def test_global_average_pool(self, float64, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        np.testing.assert_allclose(F.global_average_pool(Tensor(x)).data, x.mean(axis=(1, 2)))


class TestDropout:

    def test_identity_in_inference(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        assert F.dropout(x, 0.5, training=False, rng=None) is x

    def test_inverted_scaling(self, float64):
        x = Tensor(np.ones((200, 50)))
        out = F.dropout(x, 0.5, training=True, rng=seeded_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.05

    def test_needs_rng_in_training(self):
        with pytest.raises(ValueError):
            F.dropout(Tensor(np.ones(3)), 0.5, training=True, rng=None)


class TestContainers:

    def test_flatten_row_major(self, rng):
        x = rng.normal(size=(2, 3, 3, 2)).astype(np.float32)
        np.testing.assert_array_equal(F.flatten(Tensor(x)).data, x.reshape(2, -1))

    def test_sequential_parameter_names(self, rng):
        seq = Sequential("stage0", [Conv2D("conv", 3, 4, 3, rng), BatchNorm("bn", 4)])
        names = [name for name, _ in seq.parameters()]
        assert names == ["conv/kernel", "conv/bias", "bn/gamma", "bn/beta"]
        assert [name for name, _ in seq.buffers()] == ["bn/running_mean", "bn/running_var"]

    def test_duplicate_names_rejected(self, rng):
        with pytest.raises(ValueError):
            Sequential("s", [Dense("d", 2, 2, rng), Dense("d", 2, 2, rng)])


class TestResidualBlock:

    def test_zero_residual_is_identity(self, float64, rng):
        block = ResidualBlock("block", 4, 4, 1, rng)
        conv2 = block.residual.layers[-1]
        conv2.kernel.data[...] = 0.0
        x = Tensor(rng.normal(size=(2, 5, 5, 4)))
        np.testing.assert_array_equal(block(x, training=True).data, x.data)

    def test_projection_when_shapes_change(self, rng):
        block = ResidualBlock("block", 4, 8, 2, rng)
        assert block.projection is not None
        assert block.output_shape((1, 8, 8, 4)) == (1, 4, 4, 8)
        out = block(Tensor(rng.normal(size=(2, 8, 8, 4))), training=True)
        assert out.shape == (2, 4, 4, 8)

    def test_shortcut_can_be_ablated(self, float64, rng):
        block = ResidualBlock("block", 2, 2, 1, rng)
        block.residual.layers[-1].kernel.data[...] = 0.0
        block.use_shortcut = False
        out = block(Tensor(rng.normal(size=(2, 3, 3, 2))), training=True)
        np.testing.assert_array_equal(out.data, np.zeros((2, 3, 3, 2)))
