"""Named-tensor archives: the flat ``TRIPW`` binary format and safetensors.

TRIPW layout (all integers little-endian)::

    b"TRIPW\\0"
    u32 tensor_count
    repeated tensor_count times:
        u16 name_length, name (utf-8)
        u8  rank, u32 dims[rank]
        f32 data[prod(dims)]
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError, IoError

MAGIC = b"TRIPW\0"


def encode_tripw(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_tripw(data: bytes, offset: int = 0) -> tuple[dict[str, np.ndarray], int]:
    """Parse a TRIPW blob starting at ``offset``. Returns ``(tensors, end_offset)``."""
    view = memoryview(data)

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointError("truncated TRIPW tensor archive")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a TRIPW archive (bad magic)")
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return tensors, offset


def write_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tripw(tensors))


def read_archive(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Load a TRIPW or safetensors file. Returns ``(tensors, metadata)``."""
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no such weights file: {path}")
    data = path.read_bytes()
    if data.startswith(MAGIC):
        tensors, end = decode_tripw(data)
        if end != len(data):
            raise CheckpointError(f"{path}: {len(data) - end} trailing bytes after archive")
        return tensors, {}
    try:
        from safetensors import safe_open
    except ImportError:  # pragma: no cover - safetensors ships with transformers
        raise CheckpointError(f"{path}: not TRIPW and safetensors is not installed") from None
    try:
        with safe_open(str(path), framework="np") as fh:
            meta = dict(fh.metadata() or {})
            tensors = {k: fh.get_tensor(k).astype(np.float32) for k in fh.keys()}
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable tensor archive ({exc})") from None
    return tensors, meta


def content_hash(tensors: Mapping[str, np.ndarray]) -> int:
    """64-bit hash over tensors in sorted-name order, little-endian encoding."""
    h = hashlib.blake2b(digest_size=8)
    for name in sorted(tensors):
        arr = np.array(tensors[name], order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw_name = name.encode("utf-8")
        h.update(struct.pack("<I", len(raw_name)) + raw_name)
        h.update(arr.dtype.str.encode("ascii"))
        h.update(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
        h.update(arr.tobytes())
    return int.from_bytes(h.digest(), "little")
