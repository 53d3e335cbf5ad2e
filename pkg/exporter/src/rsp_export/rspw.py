"""Independent .rspw codec for the exporter side.

Deliberately written from the format description alone (magic "RSPW",
u32 version=1, u32 count, then per entry u32 name length / name / u8 rank /
u32 dims / f32 payload, all little-endian) so that byte compatibility with
the engine is a real cross-check rather than shared code.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RSPW"
VERSION = 1


def write_rspw(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(tensors))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        if arr.ndim < 1 or arr.ndim > 4:
            raise ValueError(f"'{name}': rank {arr.ndim} outside 1..4")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def read_rspw(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ValueError(f"not an rspw archive (magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported rspw version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank = data[pos]
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims))
        out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes")
    return out
