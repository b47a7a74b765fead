"""Binary named-tensor checkpoints.

Layout (little-endian)::

    b"VIPC"  u8 version  u32 record_count
    per record: u16 name_len, name (utf-8), u8 rank, rank x u32 extents,
                prod(extents) x f32 values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import InvalidInput

MAGIC = b"VIPC"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise InvalidInput(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise InvalidInput(f"{path}: unsupported checkpoint version {version}")
    off = 9
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    if off != len(buf):
        raise InvalidInput(f"{path}: {len(buf) - off} trailing bytes")
    return out
