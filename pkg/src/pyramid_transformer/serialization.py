"""Named-tensor container ("PYTF1").

Layout, all integers little-endian::

    b"PYTF1"
    u32 count
    repeated count times:
        u32 name_length, name (UTF-8)
        u32 rank, rank x u64 extents
        prod(extents) x f32 data, row-major
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"PYTF1"


class ContainerError(ValueError):
    """Raised for malformed or truncated tensor containers."""


def write_tensors(stream: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    stream.write(MAGIC)
    stream.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        stream.write(struct.pack("<I", len(raw)))
        stream.write(raw)
        stream.write(struct.pack("<I", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    offset = stream.tell()
    buf = stream.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated container at offset {offset}: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def read_tensors(stream: BinaryIO) -> dict[str, np.ndarray]:
    magic = _read_exact(stream, len(MAGIC), "magic")
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", _read_exact(stream, 4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(stream, 4, f"name length of tensor {i}"))
        try:
            name = _read_exact(stream, name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"tensor {i}: name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<I", _read_exact(stream, 4, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, f"extents of {name!r}"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(_read_exact(stream, 4 * n, f"data of {name!r}"), dtype="<f4")
        out[name] = data.astype(np.float32).reshape(shape)
    trailing = stream.read(1)
    if trailing:
        raise ContainerError(f"unexpected trailing bytes at offset {stream.tell() - 1}")
    return out


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], prefix: bytes = b"") -> None:
    with open(path, "wb") as fh:
        fh.write(prefix)
        write_tensors(fh, tensors)


def load_tensors(path: str | os.PathLike, prefix_len: int = 0) -> tuple[bytes, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < prefix_len:
        raise ContainerError(f"truncated file at offset {len(blob)}: missing {prefix_len}-byte prefix")
    stream = io.BytesIO(blob[prefix_len:])
    try:
        tensors = read_tensors(stream)
    except ContainerError as exc:
        raise ContainerError(f"{exc} (file offset base {prefix_len})") from None
    return blob[:prefix_len], tensors
