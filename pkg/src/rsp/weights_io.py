"""Portable binary weight archives (.rspw).

Layout, all little-endian:

    magic "RSPW" | u32 version=1 | u32 entry count
    per entry: u32 name length | name bytes (UTF-8) | u8 rank |
               rank x u32 dims | prod(dims) x f32 payload

write(read(b)) == b and read(write(a)) == a, bitwise.  Errors carry the byte
offset at which decoding failed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RSPW"
VERSION = 1
MAX_RANK = 4

__all__ = ["ArchiveError", "ValidationReport", "read_archive", "write_archive",
           "read_archive_file", "write_archive_file", "validate_against_descriptor"]


class ArchiveError(ValueError):
    """Malformed archive bytes; message includes the failing byte offset."""


def _check_entry(name: str, t: np.ndarray) -> None:
    if not name:
        raise ArchiveError("archive entry with empty name")
    if t.dtype != np.float32:
        raise ArchiveError(f"entry '{name}' has dtype {t.dtype}, archives hold float32 only")
    if t.ndim < 1 or t.ndim > MAX_RANK:
        raise ArchiveError(f"entry '{name}' has rank {t.ndim}, supported range is 1..{MAX_RANK}")
    if any(e < 1 for e in t.shape):
        raise ArchiveError(f"entry '{name}' has a zero extent in shape {t.shape}")


def write_archive(archive: dict[str, np.ndarray]) -> bytes:
    """Serialize an ordered name -> float32 tensor map."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(archive))]
    for name, t in archive.items():
        _check_entry(name, t)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def read_archive(data: bytes) -> dict[str, np.ndarray]:
    """Parse archive bytes; rejects bad magic, truncation, duplicates, trailing bytes."""
    if data[:4] != MAGIC:
        raise ArchiveError(f"bad magic {data[:4]!r} at byte offset 0, expected {MAGIC!r}")
    off = 4

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise ArchiveError(f"truncated archive: needed {n} bytes for {what} at byte offset {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ArchiveError(f"unsupported version {version} at byte offset 4")
    archive: dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_off = off
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveError(f"non-UTF-8 entry name at byte offset {entry_off}") from e
        if not name:
            raise ArchiveError(f"empty entry name at byte offset {entry_off}")
        if name in archive:
            raise ArchiveError(f"duplicate entry name '{name}' at byte offset {entry_off}")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        if rank < 1 or rank > MAX_RANK:
            raise ArchiveError(f"entry '{name}': rank {rank} outside 1..{MAX_RANK} at byte offset {off - 1}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        if any(d < 1 for d in dims):
            raise ArchiveError(f"entry '{name}': zero extent in dims {dims} at byte offset {off - 4 * rank}")
        n_el = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * n_el, f"payload of '{name}'")
        archive[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if off != len(data):
        raise ArchiveError(f"{len(data) - off} trailing bytes at byte offset {off}")
    return archive


def read_archive_file(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return read_archive(f.read())


def write_archive_file(archive: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as f:
        f.write(write_archive(archive))


@dataclass
class ValidationReport:
    """Archive/descriptor cross-check result; empty lists == valid."""

    missing: list[str] = field(default_factory=list)
    shape_mismatches: list[str] = field(default_factory=list)
    unused: list[str] = field(default_factory=list)

    def ok(self) -> bool:
        return not (self.missing or self.shape_mismatches or self.unused)

    def lines(self) -> list[str]:
        out = [f"missing weight: {m}" for m in self.missing]
        out += [f"shape mismatch: {m}" for m in self.shape_mismatches]
        out += [f"unused entry: {u}" for u in self.unused]
        return out


def validate_against_descriptor(archive: dict[str, np.ndarray], model) -> ValidationReport:
    """Check every descriptor weight_ref resolves with the right shape, and nothing is left over."""
    report = ValidationReport()
    used = set()
    for layer in model.layers:
        for role, ref in layer.weight_refs.items():
            expected = model.expected_weight_shape(layer, role)
            if ref not in archive:
                report.missing.append(f"{layer.name}.{role} -> '{ref}'")
                continue
            used.add(ref)
            got = tuple(archive[ref].shape)
            if expected is not None and got != expected:
                report.shape_mismatches.append(
                    f"{layer.name}.{role} -> '{ref}': archive has {got}, descriptor expects {expected}"
                )
    report.unused = sorted(set(archive) - used)
    return report
