"""Versioned checkpoint container: a JSON header followed by raw little-endian
tensor blobs. Written atomically; byte-identical for identical contents."""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

MAGIC = b"FMAECKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


def save_checkpoint(path, header: Dict, tensors: Dict[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["format_version"] = CHECKPOINT_VERSION
    full_header["tensors"] = index
    head = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def read_header(path) -> Dict:
    return load_checkpoint(path, tensors=False)[0]


def load_checkpoint(path, tensors: bool = True) -> Tuple[Dict, Dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, head_len = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(head_len))
        out = {}
        if tensors:
            data = fh.read()
            for entry in header["tensors"]:
                chunk = data[entry["offset"]: entry["offset"] + entry["nbytes"]]
                arr = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
                out[entry["name"]] = torch.from_numpy(arr).to(_TORCH[entry["dtype"]])
    return header, out
