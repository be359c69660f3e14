"""PNG formats and the checkpoint manifest+blob format."""

import json

import numpy as np
import pytest

from steerdiff import checkpoint as ckpt
from steerdiff import nn, pngio


def test_map16_roundtrip_quantization(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.random((24, 17))
    path = tmp_path / "m.png"
    pngio.save_map16(path, v)
    back = pngio.load_map16(path)
    assert back.shape == v.shape
    assert np.abs(back - v).max() <= 0.5 / 65535.0 + 1e-7


def test_map16_value_rule(tmp_path):
    v = np.array([[0.0, 1.0], [0.5, 0.25]])
    path = tmp_path / "q.png"
    pngio.save_map16(path, v)
    from PIL import Image
    raw = np.asarray(Image.open(path), dtype=np.uint16)
    assert raw[0, 0] == 0 and raw[0, 1] == 65535
    assert raw[1, 0] == round(65535 * 0.5) and raw[1, 1] == round(65535 * 0.25)


def test_map16_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError, match="outside"):
        pngio.save_map16(tmp_path / "bad.png", np.array([[1.5]]))


def test_mask_roundtrip_and_rejection(tmp_path):
    m = np.where(np.random.default_rng(1).random((10, 10)) > 0.5, 255, 0).astype(np.uint8)
    path = tmp_path / "mask.png"
    pngio.save_mask(path, m)
    assert np.array_equal(pngio.load_mask(path), m)
    with pytest.raises(ValueError, match="non-binary"):
        pngio.save_mask(tmp_path / "bad.png", np.array([[0, 3]], dtype=np.uint8))


def test_png_bytes_deterministic(tmp_path):
    v = np.random.default_rng(2).random((16, 16))
    pngio.save_map16(tmp_path / "a.png", v)
    pngio.save_map16(tmp_path / "b.png", v)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


# --- checkpoints ------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    tensors = {
        "w": np.arange(12, dtype=np.float32).reshape(3, 4),
        "b": np.array([1.5, -2.0], dtype=np.float32),
        "scalar": np.float32(7.0).reshape(()),
    }
    ckpt.save_checkpoint(tmp_path / "m", tensors, meta={"kind": "test", "extra": [1, 2]})
    back, meta = ckpt.load_checkpoint(tmp_path / "m")
    assert meta == {"kind": "test", "extra": [1, 2]}
    for name, arr in tensors.items():
        assert np.array_equal(back[name], np.asarray(arr, dtype=np.float32))


def test_checkpoint_manifest_layout(tmp_path):
    tensors = {"a": np.zeros((2, 3), dtype=np.float32),
               "b": np.ones(5, dtype=np.float32)}
    ckpt.save_checkpoint(tmp_path / "m", tensors)
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["dtype"] == "<f4"
    entries = {e["name"]: e for e in manifest["tensors"]}
    assert entries["a"]["shape"] == [2, 3] and entries["a"]["offset"] == 0
    assert entries["b"]["offset"] == 2 * 3 * 4
    blob = (tmp_path / "m.bin").read_bytes()
    assert len(blob) == manifest["total_bytes"] == (6 + 5) * 4
    # little-endian float32 payload, readable without numpy metadata
    assert np.frombuffer(blob, dtype="<f4", count=6).reshape(2, 3).sum() == 0.0


def test_checkpoint_shape_validation(tmp_path):
    lin = nn.Linear(3, 2, rng=np.random.default_rng(0))
    ckpt.save_module(tmp_path / "lin", lin)
    other = nn.Linear(3, 2, rng=np.random.default_rng(1))
    ckpt.load_module(tmp_path / "lin", other)
    assert other.param_checksum() == lin.param_checksum()

    wrong = nn.Linear(4, 2, rng=np.random.default_rng(2))
    with pytest.raises(Exception, match="shape"):
        ckpt.load_module(tmp_path / "lin", wrong)


def test_checkpoint_missing_and_corrupt(tmp_path):
    with pytest.raises(FileNotFoundError):
        ckpt.load_checkpoint(tmp_path / "nope")
    ckpt.save_checkpoint(tmp_path / "m", {"a": np.zeros(4, dtype=np.float32)})
    blob = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "m.bin").write_bytes(blob[:-4])
    with pytest.raises(ValueError, match="bytes"):
        ckpt.load_checkpoint(tmp_path / "m")


def test_checkpoint_meta_mismatch(tmp_path):
    lin = nn.Linear(3, 2, rng=np.random.default_rng(0))
    ckpt.save_module(tmp_path / "lin", lin, meta={"kind": "backbone"})
    with pytest.raises(ValueError, match="meta mismatch"):
        ckpt.load_module(tmp_path / "lin", lin, expect_meta={"kind": "adapter"})
