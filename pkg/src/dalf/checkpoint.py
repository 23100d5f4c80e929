"""Single-file binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"DALFCKPT"
    u8        version (1)
    u32       header length H
    H bytes   UTF-8 JSON header
    ...       tensor blobs, concatenated in header order

The header holds ``model_config``, ``train_config``, ``iteration``,
``stage``, ``rng`` (numpy bit-generator state, when present), ``stats``,
``optimizer`` (param groups) and ``tensors``: a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` records where ``offset``
counts from the first byte after the header and ``dtype`` is one of
``f32`` / ``i64`` / ``u8``. Tensor names are prefixed ``model/`` (parameters
and batch-norm buffers), ``optim/<param-index>/<key>`` (Adam moments and step
counts), ``grad/`` (pending accumulated gradients) and ``rng/torch``
(torch generator state).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"DALFCKPT"
VERSION = 1
_DTYPES = {"f32": ("<f4", torch.float32), "i64": ("<i8", torch.int64), "u8": ("u1", torch.uint8)}


def _dtype_tag(t: torch.Tensor) -> str:
    if t.dtype == torch.uint8:
        return "u8"
    if t.dtype in (torch.int64, torch.int32, torch.bool):
        return "i64"
    return "f32"


def pack(header: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    records = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        tag = _dtype_tag(t)
        arr = t.detach().cpu().numpy().astype(_DTYPES[tag][0])
        raw = np.ascontiguousarray(arr).tobytes()
        records.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(header, tensors=records)
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<BI", VERSION, len(hjson)) + hjson + b"".join(blobs)


def unpack(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if data[:8] != MAGIC:
        raise FormatError("bad DALFCKPT magic", offset=0)
    if len(data) < 13:
        raise FormatError("truncated DALFCKPT header", offset=len(data))
    version, hlen = struct.unpack_from("<BI", data, 8)
    if version != VERSION:
        raise FormatError(f"unsupported DALFCKPT version {version}", offset=8)
    start = 13 + hlen
    if len(data) < start:
        raise FormatError("truncated DALFCKPT header", offset=len(data))
    try:
        header = json.loads(data[13:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt DALFCKPT header: {exc}", offset=13) from exc
    tensors = {}
    for rec in header.pop("tensors"):
        np_dtype, _ = _DTYPES[rec["dtype"]]
        begin = start + rec["offset"]
        end = begin + rec["nbytes"]
        if end > len(data):
            raise FormatError(f"truncated tensor {rec['name']!r}", offset=len(data))
        arr = np.frombuffer(data[begin:end], dtype=np_dtype).reshape(rec["shape"])
        tensors[rec["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def write(path, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(pack(header, tensors))
    tmp.replace(path)


def read(path) -> tuple[dict, dict[str, torch.Tensor]]:
    return unpack(Path(path).read_bytes())
