"""Single-file checkpoints: magic, header length, JSON header, raw blobs.

Layout::

    b"SCKPT\\x00\\x01\\x00"            8-byte magic
    uint64 little-endian            header length in bytes
    UTF-8 JSON header               {"config", "step", "seed", "extra", "tensors"}
    concatenated blobs              float32 little-endian, C order

Each entry of ``tensors`` is ``{"name", "shape", "offset", "nbytes"}`` with
offsets relative to the start of the blob section.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"SCKPT\x00\x01\x00"


def save_checkpoint(path, state_dict, config=None, step=0, seed=0, extra=None):
    table, blobs, offset = [], [], 0
    for name, t in state_dict.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"config": config, "step": int(step), "seed": int(seed), "extra": extra or {}, "tensors": table},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    """Returns (header dict, {name: float32 tensor})."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < len(MAGIC) + 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header") from exc
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        lo, hi = base + e["offset"], base + e["offset"] + e["nbytes"]
        if hi > len(data):
            raise FormatError(f"{path}: blob {e['name']} truncated")
        arr = np.frombuffer(data[lo:hi], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_into(module, tensors, strict=True):
    """Copy checkpoint tensors into ``module`` keeping its dtype."""
    own = module.state_dict()
    missing = set(own) - set(tensors)
    unexpected = set(tensors) - set(own)
    if strict and (missing or unexpected):
        raise FormatError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in tensors.items() if k in own}, strict=strict)
    return module
