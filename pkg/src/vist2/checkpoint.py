"""Versioned named-tensor container.

Layout::

    magic        8 bytes   b"VIST2CKP"
    version      u32       little-endian
    header_len   u64
    header       JSON (utf-8, sorted keys): {"meta": {...}, "tensors": [
                     {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      raw little-endian tensor bytes, in header order
    sha256       32 bytes over everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VIST2CKP"
VERSION = 1

_DTYPES = {
    "float32": torch.float32, "float64": torch.float64, "float16": torch.float16,
    "int64": torch.int64, "int32": torch.int32, "uint8": torch.uint8, "bool": torch.bool,
}
_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def to_bytes(tensors: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _NAMES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": _NAMES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if len(blob) < len(MAGIC) + 12 + 32 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, 8)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    header = json.loads(body[20:20 + hlen])
    payload = body[20 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        dtype = _DTYPES[e["dtype"]]
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype=np_dtype)
        tensors[e["name"]] = torch.from_numpy(arr.copy()).reshape(e["shape"])
    return tensors, header["meta"]


def save(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    return from_bytes(Path(path).read_bytes())
