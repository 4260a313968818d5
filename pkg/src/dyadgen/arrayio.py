"""Deterministic named-array container used for samples and checkpoints.

Byte layout (all integers little-endian, unsigned):

    magic    4 bytes   b"DGA1"
    meta_len u64       length of the UTF-8 JSON metadata record
    meta     bytes     JSON object (version, format-specific fields)
    count    u32       number of arrays
    then per array, in insertion order:
        name_len u16, name (UTF-8)
        dtype    1 byte  (see _DTYPE_CODES; all multi-byte types little-endian)
        ndim     u8
        shape    ndim * u64
        data     raw C-order bytes

The writer is byte-deterministic: identical arrays + metadata always produce
identical files, which is what makes seed-replay hash checks meaningful.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"DGA1"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("uint8"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(Exception):
    """Raised when a container file is malformed or truncated."""


def write_container(path, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array '{name}'")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def read_container(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        buf = f.read()
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container: expected {what} at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise ContainerError(f"{path}: not a DGA1 container")
    (meta_len,) = struct.unpack("<Q", take(8, "meta length"))
    try:
        meta = json.loads(bytes(take(meta_len, "metadata")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: bad metadata record: {e}") from e
    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (code,) = struct.unpack("<B", take(1, "dtype code"))
        if code not in _CODE_DTYPES:
            raise ContainerError(f"{path}: unknown dtype code {code} for '{name}'")
        dtype = _CODE_DTYPES[code]
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "shape")) if ndim else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        if ndim and 0 in shape:
            nbytes = 0
        data = take(nbytes, f"data of '{name}'")
        arrays[name] = np.frombuffer(bytes(data), dtype=dtype).reshape(shape).copy()
    if pos != len(view):
        raise ContainerError(f"{path}: {len(view) - pos} trailing bytes")
    return arrays, meta
