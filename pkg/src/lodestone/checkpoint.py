"""Versioned binary container for named float arrays.

Layout (all integers little-endian):

    magic          4 bytes  b"LDST"
    version        uint32
    array count    uint32
    per array:
        name length    uint32
        name           UTF-8 bytes
        rank           uint32
        extents        rank * int64
        precision tag  uint8   (4 = float32, 8 = float64)
        payload        raw little-endian values, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LDST"
VERSION = 1

_TAG_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


class CheckpointError(RuntimeError):
    """Malformed or unreadable checkpoint container."""


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays; insertion order is preserved on disk."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_TO_TAG:
                raise CheckpointError(
                    f"array '{name}' has unsupported dtype {arr.dtype}; "
                    "only float32/float64 are storable"
                )
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<q", extent))
            fh.write(struct.pack("<B", _DTYPE_TO_TAG[arr.dtype]))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container back into {name: array}, native byte order."""
    path = Path(path)
    data = path.read_bytes()
    view = memoryview(data)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"{path}: truncated container at offset {off}")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a checkpoint container)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        extents = struct.unpack(f"<{rank}q", take(8 * rank)) if rank else ()
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _TAG_TO_DTYPE:
            raise CheckpointError(f"{path}: unknown precision tag {tag} for '{name}'")
        dtype = _TAG_TO_DTYPE[tag]
        n_items = int(np.prod(extents)) if extents else 1
        raw = take(n_items * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(extents)
        arrays[name] = arr.astype(dtype.newbyteorder("="))
    if off != len(view):
        raise CheckpointError(f"{path}: {len(view) - off} trailing bytes after last array")
    return arrays
