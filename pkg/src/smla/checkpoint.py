"""Binary checkpoint container.

Layout (little-endian)::

    b"SMLA" | u32 version | u32 text_len | text (UTF-8)
    repeated: u16 name_len | name | u8 rank | u32 dims[rank] | f32 data

The text blob carries the run configuration and a ``tensor_count`` so that a
file cut exactly at a record boundary is still detected as truncated.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CheckpointVersionError, TruncatedCheckpointError

MAGIC = b"SMLA"
VERSION = 1


def write(path, text: str, tensors):
    """``tensors`` is an iterable of ``(name, array)``; arrays are stored as float32."""
    body = text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(body)) + body)
        for name, arr in tensors:
            arr = np.asarray(arr)
            key = name.encode("utf-8")
            f.write(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read(path) -> tuple[str, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}, not a checkpoint")
    if len(blob) < 12:
        raise TruncatedCheckpointError(f"{path}: header cut short")
    version, text_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, this build reads version {VERSION}")
    pos = 12 + text_len
    if pos > len(blob):
        raise TruncatedCheckpointError(f"{path}: config text cut short")
    text = blob[12:pos].decode("utf-8")
    tensors = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedCheckpointError(f"{path}: record {len(tensors)} cut short")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    return text, tensors
