"""Binary checkpoint format.

Layout (little-endian)::

    b"NVSQ1"  u32 version  u32 block_count
    per block: u32 name_len, name (utf-8), u32 rank, u32 dims[rank], f64 values

Values are row-major, so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NVSQ1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, blocks) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:5]!r}")
    if len(data) < 13:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", data, 5)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 13
    blocks = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            blocks[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return blocks
