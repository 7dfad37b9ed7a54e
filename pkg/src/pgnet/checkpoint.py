"""Binary tensor checkpoints.

Layout (little-endian)::

    b"PGNT"  u32 version=1  u32 count
    repeated count times:
        u32 name_len  name (UTF-8)  u32 rank  u32 extents[rank]  u8 frozen  f32 data[prod(extents)]
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .errors import BadCheckpoint
from .tensor import Parameter

MAGIC = b"PGNT"
VERSION = 1


@dataclass
class Entry:
    name: str
    data: np.ndarray
    frozen: bool


def dumps(params: Mapping[str, Parameter] | Iterable[Entry]) -> bytes:
    if isinstance(params, Mapping):
        entries = [Entry(n, p.data, getattr(p, "frozen", False)) for n, p in params.items()]
    else:
        entries = list(params)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for e in entries:
        name = e.name.encode("utf-8")
        arr = np.ascontiguousarray(e.data, dtype="<f4")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", 1 if e.frozen else 0))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _read(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise BadCheckpoint("unexpected end of checkpoint")
    return b


def loads(raw: bytes) -> dict[str, Entry]:
    f = io.BytesIO(raw)
    if _read(f, 4) != MAGIC:
        raise BadCheckpoint("bad magic")
    version, count = struct.unpack("<II", _read(f, 8))
    if version != VERSION:
        raise BadCheckpoint(f"unsupported version {version}")
    out: dict[str, Entry] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read(f, 4))
        try:
            name = _read(f, nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadCheckpoint("tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<I", _read(f, 4))
        shape = struct.unpack(f"<{rank}I", _read(f, 4 * rank))
        if any(n == 0 for n in shape):
            raise BadCheckpoint(f"{name}: zero extent")
        (frozen,) = struct.unpack("<B", _read(f, 1))
        if frozen > 1:
            raise BadCheckpoint(f"{name}: frozen flag {frozen}")
        count_vals = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_read(f, 4 * count_vals), dtype="<f4").astype(np.float32).reshape(shape)
        if name in out:
            raise BadCheckpoint(f"duplicate tensor {name!r}")
        out[name] = Entry(name, data, bool(frozen))
    if f.read(1):
        raise BadCheckpoint("trailing bytes after last tensor")
    return out


def save(path: str | os.PathLike, params: Mapping[str, Parameter] | Iterable[Entry]) -> None:
    with open(path, "wb") as f:
        f.write(dumps(params))


def load(path: str | os.PathLike) -> dict[str, Entry]:
    with open(path, "rb") as f:
        return loads(f.read())
