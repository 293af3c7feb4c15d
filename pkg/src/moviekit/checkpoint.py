"""Flat tensor-record checkpoint files.

Layout (all integers little-endian)::

    b"MVKT" | u32 version | u32 header_len | header (UTF-8 JSON)
    u32 n_records
    n_records x ( u16 name_len | name | u8 ndim | ndim x u32 dims | u64 nbytes | float32 LE data )

The JSON header carries free-form metadata such as provenance and configs.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MVKT"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_records(path, records, header=None):
    """Write ``records`` (mapping name -> array-like) with a JSON ``header``."""
    head = json.dumps(header or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(head)))
        f.write(head)
        f.write(struct.pack("<I", len(records)))
        for name, value in records.items():
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            arr = np.asarray(value, dtype="<f4")
            arr = arr.copy(order="C") if arr.ndim else arr  # ascontiguousarray would make 0-d arrays 1-d
            key = name.encode()
            f.write(struct.pack("<H", len(key)))
            f.write(key)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            raw = arr.tobytes()
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def load_records(path):
    """Return ``(header, OrderedDict[name, np.ndarray])``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    header = json.loads(data[pos : pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    records = OrderedDict()
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        arr = np.frombuffer(data[pos : pos + nbytes], dtype="<f4").reshape(shape).copy()
        pos += nbytes
        records[name] = arr
    return header, records


def save_module(path, module: torch.nn.Module, header=None):
    save_records(path, module.state_dict(), header)


def load_module(path, module: torch.nn.Module, strict=True):
    header, records = load_records(path)
    state = {k: torch.from_numpy(v) for k, v in records.items()}
    module.load_state_dict(state, strict=strict)
    return header


def state_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, value in module.state_dict().items():
        h.update(name.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
