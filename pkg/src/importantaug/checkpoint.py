"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"IAUGCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H in bytes
    20      H     UTF-8 JSON header
    20+H    ...   tensor payloads, float64 little-endian, C order, back to back

The header is a JSON object with keys ``kind`` (``"recognizer"`` or
``"generator"``), ``config`` (the RunConfig dict that produced the file),
``meta`` (free-form, e.g. the word list and training history) and
``tensors``, a list of ``{"name", "shape", "offset"}`` records where
``offset`` counts bytes from the start of the payload block. JSON is written
with sorted keys and no whitespace, so equal content gives equal bytes.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError

MAGIC = b"IAUGCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def load_into(self, module: nn.Module) -> nn.Module:
        own = dict(module.named_parameters())
        if set(own) != set(self.tensors):
            missing = sorted(set(own) ^ set(self.tensors))
            raise CheckpointError(f"checkpoint tensors do not match the model: {missing[:5]}")
        with torch.no_grad():
            for name, p in own.items():
                arr = self.tensors[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(f"{name}: shape {arr.shape} != model {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr).to(p.dtype))
        return module


def from_module(kind: str, module: nn.Module, config: dict | None = None,
                meta: dict | None = None) -> Checkpoint:
    tensors = {name: p.detach().to(torch.float64).cpu().numpy().copy()
               for name, p in module.named_parameters()}
    return Checkpoint(kind, tensors, dict(config or {}), dict(meta or {}))


def dumps(ckpt: Checkpoint) -> bytes:
    records, payload, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = {"kind": ckpt.kind, "config": ckpt.config, "meta": ckpt.meta, "tensors": records}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + b"".join(payload)


def loads(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    body = memoryview(data)[start + hlen:]
    tensors = {}
    for rec in header["tensors"]:
        count = math.prod(rec["shape"])
        end = rec["offset"] + 8 * count
        if end > len(body):
            raise CheckpointError(f"truncated payload for {rec['name']}")
        arr = np.frombuffer(body[rec["offset"]:end], dtype="<f8").reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(np.float64)
    return Checkpoint(header["kind"], tensors, header.get("config", {}), header.get("meta", {}))


def save(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike, kind: str | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = loads(data)
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path} holds a {ckpt.kind} checkpoint, expected {kind}")
    return ckpt
