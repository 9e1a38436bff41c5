import json
import struct

import pytest
import torch

from mttrans.checkpoint import MAGIC, content_hash, load_checkpoint, load_module, save_checkpoint
from mttrans.detector import Detector, DetectorConfig
from mttrans.errors import FormatError, StateError
from mttrans.training import load_detector, save_detector, TrainConfig


def test_round_trip_and_layout(tmp_path):
    tensors = {"b": torch.arange(6, dtype=torch.float32).reshape(2, 3), "a": torch.tensor([1.5])}
    path = save_checkpoint(tmp_path / "x.ckpt", tensors, {"k": 1}, seed=7, meta={"role": "student"})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack("<IQ", raw[8:20])
    header = json.loads(raw[20:20 + hlen])
    assert version == 1 and [e["name"] for e in header["tensors"]] == ["a", "b"]
    assert len(raw) == 20 + hlen + 4 * 7
    back, hdr = load_checkpoint(path)
    assert hdr["seed"] == 7 and hdr["config"] == {"k": 1} and hdr["meta"]["role"] == "student"
    for k in tensors:
        assert torch.equal(back[k], tensors[k])


def test_saving_is_byte_deterministic(tmp_path):
    t = {"w": torch.randn(4, 4)}
    a = save_checkpoint(tmp_path / "a.ckpt", t, {"x": [1, 2]}, 0)
    b = save_checkpoint(tmp_path / "b.ckpt", dict(t), {"x": [1, 2]}, 0)
    assert content_hash(a) == content_hash(b)


def test_bad_magic_version_and_truncation(tmp_path):
    path = save_checkpoint(tmp_path / "x.ckpt", {"w": torch.ones(10)})
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    (tmp_path / "ver.ckpt").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-8])
    for name in ("magic", "ver", "trunc"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / f"{name}.ckpt")


def test_shape_and_name_mismatch_is_state_error():
    torch.manual_seed(0)
    small = Detector(DetectorConfig(d_model=32, n_heads=4, n_enc=1, n_dec=1, n_queries=4, n_classes=3))
    other = Detector(DetectorConfig(d_model=32, n_heads=4, n_enc=1, n_dec=1, n_queries=5, n_classes=3))
    tensors = {f"model.{k}": v for k, v in small.state_dict().items()}
    with pytest.raises(StateError, match="query_embed"):
        load_module(other, tensors, "model")
    tensors.pop("model.query_embed")
    with pytest.raises(StateError, match="missing"):
        load_module(small, tensors, "model")


def test_detector_round_trip_preserves_outputs(tmp_path):
    cfg = TrainConfig(d_model=32, n_heads=4, n_enc=1, n_dec=1, n_queries=4)
    torch.manual_seed(0)
    det = Detector(cfg.detector_config(3)).eval()
    save_detector(tmp_path / "t.ckpt", det, cfg, ["a", "b", "c"])
    back, header = load_detector(tmp_path / "t.ckpt")
    assert header["config"]["categories"] == ["a", "b", "c"] and header["meta"]["role"] == "teacher"
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(det(x).decoder.box_preds, back.eval()(x).decoder.box_preds)
