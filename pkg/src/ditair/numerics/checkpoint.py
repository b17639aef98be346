"""DITA checkpoint files.

Layout (all integers little-endian)::

    b"DITA" | version u32 | entry count u64
    per entry: name length u32 | UTF-8 name | rank u32 | dims u64 * rank | f32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DITA"
VERSION = 1


def write_checkpoint(path, entries: list[tuple[str, np.ndarray]]) -> None:
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> list[tuple[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a DITA checkpoint")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 16
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
        out.append((name, arr))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out
