"""Shape-prefixed little-endian float32 tensor container.

Used for checkpoint and subnet parameter blobs. Tensors are written in
sorted-name order so identical contents produce identical bytes (and
therefore stable content hashes).
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EGTENS1\n"


class BlobFormatError(RuntimeError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise BlobFormatError(f"not a tensor blob file: {path}")
    offset = len(MAGIC)
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        tensors[name] = data.reshape(shape).copy()
    if offset != len(raw):
        raise BlobFormatError(f"trailing bytes in tensor blob file: {path}")
    return tensors


def tensor_data_bytes(tensors: dict[str, np.ndarray]) -> int:
    """Byte size of the raw float32 payload (headers excluded)."""
    return sum(4 * int(np.prod(a.shape, dtype=np.int64)) for a in tensors.values())


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
