"""Binary checkpoint container: round-trips and corruption handling."""

import struct

import numpy as np
import pytest

from drivevqa.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def sample_sections():
    tensors = {
        "weights": {
            "layer.w": np.arange(12, dtype=np.float32).reshape(3, 4),
            "layer.b": np.array([-1.5, 2.5], dtype=np.float64),
            "steps": np.array(7, dtype=np.int64),
        }
    }
    docs = {"meta": {"vocab": ["<pad>", "stop"], "epochs": 3}}
    return tensors, docs


class TestRoundTrip:
    def test_exact_values_shapes_dtypes(self, tmp_path):
        path = tmp_path / "run.ckpt"
        tensors, docs = sample_sections()
        save_checkpoint(path, tensors, docs)
        t2, d2 = load_checkpoint(path)
        assert d2 == docs
        assert set(t2["weights"]) == set(tensors["weights"])
        for name, arr in tensors["weights"].items():
            got = t2["weights"][name]
            assert got.dtype == arr.dtype and got.shape == arr.shape
            assert np.array_equal(got, arr)

    def test_zero_dim_and_empty_tensors(self, tmp_path):
        path = tmp_path / "edge.ckpt"
        save_checkpoint(path, {"t": {"scalar": np.float32(3.0),
                                     "empty": np.zeros((0, 4), np.float32)}}, {})
        t2, _ = load_checkpoint(path)
        assert t2["t"]["scalar"].shape == ()
        assert t2["t"]["empty"].shape == (0, 4)

    def test_deterministic_bytes(self, tmp_path):
        tensors, docs = sample_sections()
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, tensors, docs)
        save_checkpoint(b, tensors, docs)
        assert a.read_bytes() == b.read_bytes()


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(MAGIC + struct.pack("<II", 99, 0))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "run.ckpt"
        tensors, docs = sample_sections()
        save_checkpoint(path, tensors, docs)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "run.ckpt"
        save_checkpoint(path, {}, {"m": {}})
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_unsupported_dtype_rejected_on_save(self, tmp_path):
        with pytest.raises(CheckpointError, match="dtype"):
            save_checkpoint(tmp_path / "x.ckpt",
                            {"t": {"bad": np.zeros(2, dtype=np.int32)}}, {})

    def test_duplicate_section_name_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="duplicate"):
            save_checkpoint(tmp_path / "x.ckpt", {"s": {}}, {"s": {}})
