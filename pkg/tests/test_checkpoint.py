import json
import struct

import pytest
import torch

from denoise_transformer.cadt import StackConfig
from denoise_transformer.checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from denoise_transformer.errors import FormatError
from denoise_transformer.model import DenoiserModel, ModelConfig
from denoise_transformer.tensorcore import OptimizerState

CFG = ModelConfig(StackConfig(1, 1, 8, 4, 2), "grey", True)


def noisy_model(seed=0):
    m = DenoiserModel.build(CFG, seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for t in m.params.entries.values():
            t.add_(torch.randn(t.shape, generator=g))
    return m


def test_round_trip_bit_equal(tmp_path):
    m = noisy_model()
    m.params.step_count = 7
    opt = OptimizerState(1e-3, 1e-8)
    for name, t in m.params.items():
        opt.first_moment[name] = torch.randn(t.shape)
        opt.second_moment[name] = torch.rand(t.shape)
    path = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(m, [{"epoch": 0, "loss": 1.0}], opt, {"step": 3}))
    ck = read_checkpoint(path)
    assert ck.model.config == CFG and ck.model.params.step_count == 7
    for name, t in m.params.items():
        assert torch.equal(ck.model.params[name], t)
        assert torch.equal(ck.optimizer.first_moment[name], opt.first_moment[name])
        assert torch.equal(ck.optimizer.second_moment[name], opt.second_moment[name])
    assert ck.curve == [{"epoch": 0, "loss": 1.0}] and ck.position == {"step": 3}
    assert load_checkpoint(path).params.names() == m.params.names()


def test_save_is_byte_deterministic(tmp_path):
    m = noisy_model(1)
    a = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(m)).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", Checkpoint(m)).read_bytes()
    assert a == b


def test_truncated_file(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(noisy_model()))
    data = path.read_bytes()
    for cut in (3, 20, len(data) - 4):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "t.ckpt")


def test_bad_magic(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(noisy_model()))
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(path)


def rewrite_manifest(path, edit):
    data = path.read_bytes()
    magic, version, n = struct.unpack_from("<4sIQ", data)
    manifest = json.loads(data[16:16 + n])
    edit(manifest)
    blob = json.dumps(manifest).encode()
    path.write_bytes(struct.pack("<4sIQ", magic, version, len(blob)) + blob + data[16 + n:])


def test_wrong_shape_names_parameter(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(noisy_model()))

    def edit(m):
        entry = next(e for e in m["tensors"] if e["name"] == "head.weight")
        entry["shape"] = [3, 3, 1, 9]

    rewrite_manifest(path, edit)
    with pytest.raises(FormatError, match="head.weight"):
        read_checkpoint(path)


def test_unknown_parameter(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(noisy_model()))
    rewrite_manifest(path, lambda m: m["tensors"][0].update(name="bogus.weight"))
    with pytest.raises(FormatError, match="bogus.weight"):
        read_checkpoint(path)
