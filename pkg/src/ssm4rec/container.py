"""Binary tensor container.

Layout, all integers unsigned 64-bit little-endian::

    b"SSM4REC1"
    count
    count x { name_len, name (utf-8), rank, extents[rank], float32 payload }
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SSM4REC1"
_U64 = struct.Struct("<Q")


class ContainerError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, _U64.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        data = arr.astype("<f4")
        if arr.dtype.kind in "iu" and np.any(data.astype(arr.dtype) != arr):
            raise ContainerError(f"{name}: integer values not exactly representable in float32")
        raw = name.encode("utf-8")
        chunks += [_U64.pack(len(raw)), raw, _U64.pack(arr.ndim)]
        chunks += [_U64.pack(n) for n in arr.shape]
        chunks.append(data.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic {buf[:8]!r}")
    pos = 8

    def u64():
        nonlocal pos
        if pos + 8 > len(buf):
            raise ContainerError(f"{path}: truncated")
        (v,) = _U64.unpack_from(buf, pos)
        pos += 8
        return v

    out: dict[str, np.ndarray] = {}
    for _ in range(u64()):
        n = u64()
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        shape = tuple(u64() for _ in range(u64()))
        size = int(np.prod(shape)) * 4
        if pos + size > len(buf):
            raise ContainerError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(buf):
        raise ContainerError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def encode_text(text: str) -> np.ndarray:
    """Store a string as a float32 vector of its utf-8 bytes."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")
