"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"BCNN"  uint32 version
    uint32 n  + n bytes of UTF-8 JSON (config snapshot, epoch, optimizer step)
    uint32 tensor count, then per tensor:
        uint16 name length, name (UTF-8)
        uint8 dtype code (4 = float32, 8 = float64), uint8 ndim, ndim x uint32 dims
        raw little-endian values

Float32 is the storage type for training runs; float64 tensors are stored as
float64 so that a save/load round trip is always bitwise.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"BCNN"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: dict
    tensors: dict = field(default_factory=dict)
    epoch: int = 0
    optimizer_step: int = 0


def atomic_write_bytes(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(ckpt):
    meta = dict(config=ckpt.config, epoch=ckpt.epoch, optimizer_step=ckpt.optimizer_step)
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = 8 if arr.dtype == np.float64 else 4
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(raw):
    if raw[:4] != MAGIC:
        raise FormatError(f"not a checkpoint: magic {raw[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", raw, pos + 4)
    pos += 8
    meta = json.loads(raw[pos : pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2 : pos + 2 + klen].decode()
            pos += 2 + klen
            code, ndim = struct.unpack_from("<BB", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 2)
            pos += 2 + 4 * ndim
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape)) * dtype.itemsize
            if pos + nbytes > len(raw):
                raise FormatError(f"tensor {name!r} truncated")
            tensors[name] = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise FormatError(f"corrupt tensor table: {exc}") from exc
    return Checkpoint(meta["config"], tensors, meta.get("epoch", 0), meta.get("optimizer_step", 0))


def save(path, ckpt):
    atomic_write_bytes(path, dumps(ckpt))


def load(path):
    return loads(Path(path).read_bytes())
