"""Versioned binary checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
a UTF-8 JSON header, then the raw little-endian tensor bytes in header
order. The header lists every tensor's name, dtype, shape and byte offset
and carries the iteration, config hash, config and optimizer metadata.
Serialization is deterministic, so save -> load -> save reproduces the
same bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"OVPCKPT\x00"
VERSION = 1

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
    "bool": (torch.bool, "|b1"),
}
_NAMES = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Unreadable checkpoint, or one that does not belong to the given config."""


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    iteration: int = 0
    config_hash: str = ""
    config: dict[str, Any] = field(default_factory=dict)
    optimizer: dict[str, Any] | None = None   # torch optimizer state_dict
    extra: dict[str, Any] = field(default_factory=dict)


def _flatten_optimizer(state: dict[str, Any] | None) -> tuple[dict[str, torch.Tensor], Any]:
    if state is None:
        return {}, None
    tensors: dict[str, torch.Tensor] = {}
    scalars: dict[str, dict[str, Any]] = {}
    for idx, slot in state["state"].items():
        for key, value in slot.items():
            if torch.is_tensor(value):
                tensors[f"{idx}/{key}"] = value
            else:
                scalars.setdefault(str(idx), {})[key] = value
    return tensors, {"param_groups": state["param_groups"], "scalars": scalars,
                     "indices": [int(i) for i in state["state"]]}


def _unflatten_optimizer(tensors: dict[str, torch.Tensor], meta: Any) -> dict[str, Any] | None:
    if meta is None:
        return None
    state: dict[int, dict[str, Any]] = {int(i): {} for i in meta["indices"]}
    for name, value in tensors.items():
        idx, key = name.split("/", 1)
        state[int(idx)][key] = value
    for idx, values in meta["scalars"].items():
        state[int(idx)].update(values)
    return {"state": state, "param_groups": meta["param_groups"]}


def to_bytes(ckpt: Checkpoint) -> bytes:
    opt_tensors, opt_meta = _flatten_optimizer(ckpt.optimizer)
    entries = [("param", k, v) for k, v in ckpt.params.items()]
    entries += [("optim", k, v) for k, v in opt_tensors.items()]
    table, blobs, offset = [], [], 0
    for group, name, tensor in entries:
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _NAMES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        dname = _NAMES[t.dtype]
        data = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        table.append({"group": group, "name": name, "dtype": dname, "shape": list(t.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"version": VERSION, "iteration": int(ckpt.iteration), "config_hash": ckpt.config_hash,
              "config": ckpt.config, "optimizer": opt_meta, "extra": ckpt.extra, "tensors": table}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    body = memoryview(data)[20 + hlen:]
    params: dict[str, torch.Tensor] = {}
    opt: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise CheckpointError(f"truncated checkpoint at tensor {entry['name']}")
        arr = np.frombuffer(body[start:start + n], dtype=_DTYPES[entry["dtype"]][1]).reshape(entry["shape"])
        tensor = torch.from_numpy(arr.copy())
        (params if entry["group"] == "param" else opt)[entry["name"]] = tensor
    return Checkpoint(params, header["iteration"], header["config_hash"], header["config"],
                      _unflatten_optimizer(opt, header["optimizer"]), header.get("extra", {}))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint; refuse a config-hash mismatch unless ``force``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    ckpt = from_bytes(path.read_bytes())
    if expected_hash is not None and ckpt.config_hash != expected_hash and not force:
        raise CheckpointError(f"{path}: config hash {ckpt.config_hash} does not match {expected_hash}")
    return ckpt
