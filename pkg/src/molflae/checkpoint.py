"""Self-describing tensor archive used for checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"MOLFLAE\\x00"
    version      uint32
    manifest_off uint64    byte offset of the manifest
    manifest_len uint64
    blobs        raw tensor bytes, back to back
    manifest     UTF-8 JSON: {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}, ...]}

Floating-point tensors are stored as little-endian float32; integer and
byte tensors keep their width.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MOLFLAE\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")

_STORE_DTYPES = {
    torch.float16: "<f4",
    torch.bfloat16: "<f4",
    torch.float32: "<f4",
    torch.float64: "<f4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
    torch.int32: "<i4",
    torch.int64: "<i8",
}


class CheckpointFormatError(ValueError):
    pass


def _to_numpy(t: torch.Tensor) -> tuple[np.ndarray, str]:
    t = t.detach().cpu()
    if t.dtype not in _STORE_DTYPES:
        raise TypeError(f"cannot store tensor of dtype {t.dtype}")
    code = _STORE_DTYPES[t.dtype]
    if code == "<f4":
        t = t.to(torch.float32)
    return np.ascontiguousarray(t.numpy()).astype(code, copy=False), code


def dumps(tensors: dict[str, torch.Tensor], meta: dict) -> bytes:
    blobs = io.BytesIO()
    entries = []
    offset = _HEADER.size
    for name in sorted(tensors):
        arr, code = _to_numpy(tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.write(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, offset, len(manifest))
    return header + blobs.getvalue() + manifest


def loads(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if len(data) < _HEADER.size:
        raise CheckpointFormatError("file too short for a checkpoint header")
    magic, version, moff, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError("bad magic; not a molflae checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    manifest = json.loads(data[moff : moff + mlen].decode())
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return tensors, manifest["meta"]


def save_archive(path, tensors, meta) -> bytes:
    data = dumps(tensors, meta)
    Path(path).write_bytes(data)
    return data


def load_archive(path):
    return loads(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
