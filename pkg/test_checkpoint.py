"""
Tests for the SGNT checkpoint codec.

Run with: pytest test_checkpoint.py -v
"""

from __future__ import annotations

import struct

import numpy as np
import pytest

from checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointManifest,
    TensorEntry,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from errors import (
    BadMagicError,
    CheckpointError,
    ShapeMismatchError,
    TruncatedBlobError,
    UnsupportedVersionError,
)
from network import BackboneConfig, OracleGradientNetwork, SelfGradBlockConfig, SGNetwork

SMALL = BackboneConfig(height=8, width=8, base_channels=4, depth=2)


@pytest.fixture
def model() -> SGNetwork:
    return SGNetwork(SMALL, SelfGradBlockConfig(stack_depth=3), seed=11, dtype=np.float32)


def _raw(manifest: CheckpointManifest, blobs: bytes, version: int = 1) -> bytes:
    text = manifest.model_dump_json().encode("utf-8")
    return MAGIC + struct.pack("<I", version) + struct.pack("<I", len(text)) + text + blobs


class TestRoundTrip:
    """save -> load preserves everything."""

    def test_parameters_bitwise_equal(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "m.ckpt", epoch=3, seed=11, mode="standard")
        loaded = load_checkpoint(path)
        assert isinstance(loaded, SGNetwork)
        assert loaded.block_cfg.stack_depth == 3
        for name, value in model.state().items():
            assert np.array_equal(loaded.state()[name], value), name

    def test_save_load_save_byte_identical(self, model, tmp_path):
        first = save_checkpoint(model, tmp_path / "a.ckpt", epoch=1, seed=11, mode="selfgrad_onestep")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "b.ckpt")
        assert first.read_bytes() == second.read_bytes()

    def test_metadata_kept(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "m.ckpt", epoch=7, seed=2, mode="madry_pgd")
        assert read_checkpoint(path).metadata == {"epoch": 7, "seed": 2, "mode": "madry_pgd"}
        assert load_checkpoint(path).metadata["epoch"] == 7

    def test_magic_and_version_header(self, model):
        data = Checkpoint.from_model(model).to_bytes()
        assert data[:4] == b"SGNT"
        assert struct.unpack_from("<I", data, 4) == (1,)

    def test_oracle_model(self, tmp_path):
        model = OracleGradientNetwork(SMALL, dtype=np.float32, zero_oracle=True)
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "o.ckpt"))
        assert isinstance(loaded, OracleGradientNetwork)
        assert loaded.zero_oracle is True
        assert loaded.parameter_checksum() == model.parameter_checksum()

    def test_same_outputs_after_reload(self, model, tmp_path):
        x = np.random.default_rng(0).uniform(0, 1, size=(3, 3, 8, 8)).astype(np.float32)
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt"))
        assert np.array_equal(loaded.two_pass_forward(x), model.two_pass_forward(x))


class TestCorruptFiles:
    """Each decoding failure has its own error kind."""

    def test_bad_magic(self, model):
        data = Checkpoint.from_model(model).to_bytes()
        with pytest.raises(BadMagicError, match="magic"):
            Checkpoint.from_bytes(b"NOPE" + data[4:])

    def test_unsupported_version(self, model):
        data = Checkpoint.from_model(model).to_bytes()
        with pytest.raises(UnsupportedVersionError, match="version 2"):
            Checkpoint.from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])

    def test_shape_disagrees_with_blob(self):
        manifest = CheckpointManifest(model={}, tensors=[TensorEntry(name="w", shape=[3, 3], offset=0, length=32)])
        with pytest.raises(ShapeMismatchError, match="w"):
            Checkpoint.from_bytes(_raw(manifest, bytes(32)))

    def test_truncated_blob(self, model):
        data = Checkpoint.from_model(model).to_bytes()
        with pytest.raises(TruncatedBlobError):
            Checkpoint.from_bytes(data[:-4])

    def test_truncated_header(self):
        with pytest.raises(TruncatedBlobError, match="header"):
            Checkpoint.from_bytes(MAGIC + b"\x01")

    def test_malformed_manifest(self):
        text = b"{not json"
        data = MAGIC + struct.pack("<I", 1) + struct.pack("<I", len(text)) + text
        with pytest.raises(CheckpointError, match="malformed"):
            Checkpoint.from_bytes(data)

    def test_missing_tensor_on_restore(self, model):
        ckpt = Checkpoint.from_model(model)
        ckpt.tensors.pop("head.b")
        with pytest.raises(ShapeMismatchError, match="head.b"):
            ckpt.restore()
