"""MILO binary container.

Layout, all integers little-endian::

    b"MILO"  u32 version  u32 meta_len  meta (UTF-8 JSON)
    repeated until EOF:
        u16 name_len  name (UTF-8)  u8 rank  u32 extent * rank  f64 payload (row-major)

Metadata is serialized with sorted keys and fixed separators so that a
read/write cycle reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MILO"
VERSION = 1


class ContainerError(ValueError):
    pass


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta_bytes = dumps_json(meta).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise ContainerError(f"array {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise ContainerError("not a MILO container (bad magic)")
    if len(data) < 12:
        raise ContainerError("truncated header")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12 + meta_len
    if pos > len(data):
        raise ContainerError("truncated metadata")
    meta = json.loads(data[12:pos].decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(data):
                raise ContainerError(f"array {name!r}: payload shorter than its extents")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise ContainerError(f"truncated array header: {exc}") from None
    return meta, arrays


def write(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(meta, arrays))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
