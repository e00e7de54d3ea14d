"""Binary checkpoint container.

Layout (little-endian)::

    b"DIDO" | u16 version | u32 meta_len | meta JSON (utf-8)
    u32 n_tensors, then per tensor:
    u16 name_len | name | u8 dtype (0=f8, 1=f4) | u8 ndim | u32 dims... | raw values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DIDO"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def dumps(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES[arr.dtype]
        nb = name.encode()
        parts.append(struct.pack(f"<H{len(nb)}sBB", len(nb), nb, code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(buf[off:off + meta_len])
    off += meta_len
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nl].decode()
        off += nl
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
        off += count * dt.itemsize
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return meta, tensors


def save(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, tensors))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
