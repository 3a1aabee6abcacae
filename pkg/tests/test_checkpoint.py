import struct

import pytest
import torch

from ovpanoptic.checkpoint import MAGIC, Checkpoint, CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes


def _ckpt():
    g = torch.Generator().manual_seed(0)
    w = torch.nn.Parameter(torch.randn(3, 4, generator=g))
    opt = torch.optim.AdamW([w], lr=1e-3)
    w.sum().backward()
    opt.step()
    params = {"a.weight": w.detach().clone(), "b.bias": torch.arange(5, dtype=torch.float64),
              "c.count": torch.tensor([1, 2], dtype=torch.int64), "d.flag": torch.tensor([True, False])}
    return Checkpoint(params, iteration=7, config_hash="abc123", config={"seed": 0, "x": [1, 2]},
                      optimizer=opt.state_dict(), extra={"note": "toy"})


def test_save_load_save_is_byte_identical(tmp_path):
    ckpt = _ckpt()
    p1 = save_checkpoint(tmp_path / "one.ckpt", ckpt)
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(tmp_path / "two.ckpt", loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_contents_survive(tmp_path):
    ckpt = _ckpt()
    back = from_bytes(to_bytes(ckpt))
    assert back.iteration == 7 and back.config == {"seed": 0, "x": [1, 2]} and back.extra == {"note": "toy"}
    for k, v in ckpt.params.items():
        assert back.params[k].dtype == v.dtype
        assert torch.equal(back.params[k], v)
    w = torch.nn.Parameter(back.params["a.weight"].clone())
    opt = torch.optim.AdamW([w], lr=1e-3)
    opt.load_state_dict(back.optimizer)
    assert torch.equal(opt.state_dict()["state"][0]["exp_avg"], ckpt.optimizer["state"][0]["exp_avg"])


def test_layout_header():
    data = to_bytes(_ckpt())
    assert data[:8] == MAGIC
    version, hlen = struct.unpack("<IQ", data[8:20])
    assert version == 1 and data[20:21] == b"{" and data[20 + hlen - 1:20 + hlen] == b"}"


def test_hash_mismatch_is_refused_unless_forced(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", _ckpt())
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, expected_hash="other")
    assert load_checkpoint(path, expected_hash="other", force=True).iteration == 7
    assert load_checkpoint(path, expected_hash="abc123").iteration == 7


def test_corrupt_files(tmp_path):
    with pytest.raises(CheckpointError, match="no such"):
        load_checkpoint(tmp_path / "missing.ckpt")
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"garbage" * 10)
    data = to_bytes(_ckpt())
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(MAGIC + struct.pack("<IQ", 99, 2) + b"{}")


def test_unsupported_dtype():
    with pytest.raises(CheckpointError, match="unsupported dtype"):
        to_bytes(Checkpoint({"x": torch.zeros(2, dtype=torch.complex64)}))
