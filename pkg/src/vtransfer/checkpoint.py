"""``VTCK`` checkpoint reader/writer.

Layout (all integers u32 little-endian)::

    b"VTCK" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE data (row-major)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .nn import DTYPE, Module, ShapeError

MAGIC = b"VTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint at byte {pos}") from exc
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last tensor")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def state_dict(model: Module) -> dict[str, np.ndarray]:
    return {name: p.value for name, p in model.named_parameters()}


def load_into(model: Module, tensors: Mapping[str, np.ndarray], strict: bool = True) -> None:
    params = dict(model.named_parameters())
    if strict:
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        if missing or extra:
            raise CheckpointError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in params.items():
        if name not in tensors:
            continue
        arr = tensors[name]
        if arr.shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.value[...] = arr.astype(DTYPE)
