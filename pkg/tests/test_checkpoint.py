"""Tests for the binary checkpoint format."""
import struct

import numpy as np
import pytest

from model.checkpoint import (
    MAGIC,
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from model.expressnet import ExpressNetModel
from model.profiles import build_model_config
from utilities.exceptions import CheckpointError


def tiny_model(num_classes=3, seed=0) -> ExpressNetModel:
    return ExpressNetModel(build_model_config("grad-check", num_classes=num_classes, seed=seed))


@pytest.fixture
def saved(tmp_path):
    model = tiny_model()
    path = save_checkpoint(model, tmp_path / "model.ckpt", optimizer_state={"step": np.array([3.0])})
    return model, path


class TestRoundTrip:

    def test_restores_parameters_and_buffers(self, saved):
        model, path = saved
        store = model.parameter_store()
        store.buffers["cnnfe1/stage0/bn/running_mean"].data[...] = 0.25
        save_checkpoint(model, path)

        other = tiny_model(seed=5)
        load_checkpoint(path, other)
        expected = store.state_dict()
        restored = other.parameter_store().state_dict()
        assert list(expected) == list(restored)
        for name in expected:
            np.testing.assert_array_equal(restored[name], expected[name])

    def test_optimizer_state_is_prefixed(self, saved):
        _, path = saved
        assert "opt/step" in read_checkpoint(path)
        optimizer_state = load_checkpoint(path, tiny_model())
        assert list(optimizer_state) == ["step"]
        np.testing.assert_array_equal(optimizer_state["step"], [3.0])

    def test_scalar_and_names_survive(self):
        tensors = decode_tensors(encode_tensors({"a/ä": np.float32(1.5), "b": np.arange(6).reshape(2, 3)}))
        assert tensors["a/ä"].shape == ()
        np.testing.assert_array_equal(tensors["b"], np.arange(6, dtype=np.float32).reshape(2, 3))

    def test_no_partial_file_left(self, saved):
        _, path = saved
        assert not path.with_name(path.name + ".partial").exists()


class TestCorruption:

    def test_bad_magic(self, saved):
        _, path = saved
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(path)

    def test_unknown_version(self, saved):
        _, path = saved
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(path)

    def test_flipped_data_byte(self, saved):
        _, path = saved
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            read_checkpoint(path)

    def test_truncated(self):
        with pytest.raises(CheckpointError):
            decode_tensors(MAGIC + b"\x01\x00")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "nope.ckpt")


class TestModelMismatch:

    def test_other_class_count(self, saved):
        _, path = saved
        with pytest.raises(CheckpointError, match="head/weight"):
            load_checkpoint(path, tiny_model(num_classes=4))

    def test_other_architecture(self, saved, tmp_path):
        _, path = saved
        other = ExpressNetModel(build_model_config("grad-check", num_classes=3, backbone_blocks=[1, 1, 1]))
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(path, other)
