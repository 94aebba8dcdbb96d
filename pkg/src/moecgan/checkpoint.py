"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic  b"MCKP"            4 bytes
    version u32               4 bytes
    manifest length u64       8 bytes
    manifest (UTF-8 JSON)     format_version, config_hash, iteration, epoch, dcc, ...
    tensor count u32
    per tensor:
        name length u16, name (UTF-8)
        dtype code u8        (see DTYPES)
        ndim u8, dims u64 * ndim
        payload              raw little-endian bytes, C order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCKP"
VERSION = 1
DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<u1", 4: "<i4", 5: "<u4", 6: "<u8"}
_CODES = {np.dtype(v): k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save(path: str | Path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    man = dict(manifest)
    man.setdefault("format_version", VERSION)
    blob = json.dumps(man, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", _CODES[np.dtype(dt)], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[_CODES[np.dtype(dt)]]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    version, mlen = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    manifest = json.loads(data[off : off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    try:
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nl].decode()
            off += nl
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            dt = np.dtype(DTYPES[code])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(data):
                raise CheckpointError(f"truncated payload for tensor {name}")
            tensors[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return manifest, tensors
