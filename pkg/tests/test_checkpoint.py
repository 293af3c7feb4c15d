import numpy as np
import pytest
import torch

from moviekit import checkpoint as ck
from moviekit.denoiser import DenoiserConfig, build_denoiser


def test_records_roundtrip(tmp_path):
    recs = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "scalar": np.float32(3.5), "t": torch.ones(4)}
    ck.save_records(tmp_path / "x.ckpt", recs, {"stage": "test", "n": 3})
    header, back = ck.load_records(tmp_path / "x.ckpt")
    assert header == {"stage": "test", "n": 3}
    assert list(back) == ["a", "scalar", "t"]
    assert np.array_equal(back["a"], recs["a"]) and back["scalar"].shape == () and float(back["scalar"]) == 3.5


def test_module_roundtrip_bitwise(tmp_path):
    m = build_denoiser(DenoiserConfig(), np.random.default_rng(0))
    ck.save_module(tmp_path / "m.ckpt", m, {"stage": "base"})
    m2 = build_denoiser(DenoiserConfig(), np.random.default_rng(1))
    assert ck.state_checksum(m2) != ck.state_checksum(m)
    header = ck.load_module(tmp_path / "m.ckpt", m2)
    assert header["stage"] == "base"
    assert ck.state_checksum(m2) == ck.state_checksum(m)


def test_bad_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello world")
    with pytest.raises(ck.CheckpointError):
        ck.load_records(tmp_path / "junk")
    ck.save_records(tmp_path / "v.ckpt", {})
    raw = bytearray((tmp_path / "v.ckpt").read_bytes())
    raw[4] = 9
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ck.CheckpointError):
        ck.load_records(tmp_path / "v.ckpt")
