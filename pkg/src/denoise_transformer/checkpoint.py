"""Checkpoint container.

Layout: ``MAGIC`` (4 bytes), format version (uint32 LE), manifest length
(uint64 LE), UTF-8 JSON manifest, then every tensor listed in the manifest as
raw little-endian float32 in manifest order.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, FormatError
from .model import DenoiserModel, ModelConfig
from .tensorcore import OptimizerState

MAGIC = b"DTCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    model: DenoiserModel
    curve: list[dict] = field(default_factory=list)
    optimizer: OptimizerState | None = None
    position: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    tensors: list[tuple[str, str, torch.Tensor]] = [
        ("param", name, t) for name, t in ckpt.model.params.items()]
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"learning_rate": o.learning_rate, "weight_decay": o.weight_decay,
               "beta1": o.beta1, "beta2": o.beta2, "epsilon": o.epsilon}
        tensors += [("adam_m", n, t) for n, t in o.first_moment.items()]
        tensors += [("adam_v", n, t) for n, t in o.second_moment.items()]
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.model.config.to_dict(),
        "step_count": ckpt.model.params.step_count,
        "tensors": [{"kind": kind, "name": name, "shape": list(t.shape)} for kind, name, t in tensors],
        "optimizer": opt,
        "position": ckpt.position,
        "curve": ckpt.curve,
        "extra": ckpt.extra,
    }
    blob = json.dumps(manifest).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, _, t in tensors:
            fh.write(t.detach().cpu().numpy().astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> Checkpoint:
    """Load a checkpoint, validating it against the current model definition."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: manifest version mismatch")
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (TypeError, KeyError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid model config: {exc}") from exc
    model = DenoiserModel.build(config)
    entries = manifest["tensors"]
    params = [e for e in entries if e["kind"] == "param"]
    expected = {name: tuple(t.shape) for name, t in model.params.items()}
    names = [e["name"] for e in params]
    if sorted(names) != sorted(expected):
        missing = sorted(set(expected) - set(names))
        unknown = sorted(set(names) - set(expected))
        raise FormatError(f"{path}: parameter set mismatch; missing {missing[:5]}, unknown {unknown[:5]}")
    for e in entries:
        ref = expected.get(e["name"])
        if tuple(e["shape"]) != ref:
            raise FormatError(f"{path}: parameter {e['name']!r} ({e['kind']}) has shape "
                              f"{tuple(e['shape'])}, model expects {ref}")
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in entries]
    offset = start + mlen
    if len(data) != offset + 4 * sum(sizes):
        raise FormatError(f"{path}: payload is {len(data) - offset} bytes, manifest needs {4 * sum(sizes)}")
    arrays = {}
    for e, size in zip(entries, sizes):
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(e["shape"])
        arrays[(e["kind"], e["name"])] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * size
    with torch.no_grad():
        for name, t in model.params.items():
            t.copy_(arrays[("param", name)])
    model.params.step_count = int(manifest.get("step_count", 0))
    opt = None
    if manifest.get("optimizer"):
        opt = OptimizerState(**manifest["optimizer"])
        for (kind, name), arr in arrays.items():
            if kind == "adam_m":
                opt.first_moment[name] = arr
            elif kind == "adam_v":
                opt.second_moment[name] = arr
    return Checkpoint(model=model, curve=manifest.get("curve", []), optimizer=opt,
                      position=manifest.get("position", {}), extra=manifest.get("extra", {}))


def load_checkpoint(path) -> DenoiserModel:
    return read_checkpoint(path).model
