"""Self-describing binary checkpoint container.

Layout::

    b"IDTCKPT\\0"   8-byte magic
    u32            format version
    u64            header length in bytes
    header         UTF-8 JSON: {"version", "meta", "tensors": [{name, dtype, shape, offset, nbytes}]}
    payload        raw little-endian tensor bytes, offsets relative to payload start

The header is written with sorted keys so identical content yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"IDTCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {tensor.dtype}")
        code = _DTYPES[tensor.dtype]
        blob = np.ascontiguousarray(tensor.numpy(), dtype=code).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(tensor.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[_PREFIX.size : _PREFIX.size + hlen])
    except ValueError as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from None
    base = _PREFIX.size + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(data, dtype=entry["dtype"], count=int(np.prod(entry["shape"], dtype=np.int64)), offset=start)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy()).to(_TORCH[entry["dtype"]])
    return tensors, header["meta"]
