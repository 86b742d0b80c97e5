"""Single-file binary checkpoint format.

Layout, all integers little-endian:

    bytes 0:4    magic "MOTE"
    bytes 4:8    format version (u32, currently 1)
    u64          metadata length, followed by that many bytes of UTF-8 JSON
    u32          tensor record count
    per record:  u16 name length + name bytes
                 u8 dtype code (0 = float64, 1 = float32)
                 u8 rank, then rank x u32 dims
                 raw row-major data
    u32          crc32 over everything between the version field and here

Tensors are float32 on disk by default (training checkpoints) and are
always returned as float64.  Pass dtype="f64" to keep full precision.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"MOTE"
VERSION = 1

_DTYPE_CODES = {"f64": 0, "f32": 1}
_CODE_DTYPES = {0: "<f8", 1: "<f4"}


def save_checkpoint(path, meta: dict, tensors: dict, dtype: str = "f32") -> None:
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPE_CODES)}, got {dtype!r}")
    code = _DTYPE_CODES[dtype]
    np_dtype = _CODE_DTYPES[code]
    body = bytearray()
    meta_bytes = json.dumps(meta).encode()
    body += struct.pack("<Q", len(meta_bytes))
    body += meta_bytes
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np_dtype)
        name_bytes = name.encode()
        if len(name_bytes) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        body += struct.pack("<H", len(name_bytes))
        body += name_bytes
        body += struct.pack("<BB", code, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    blob = MAGIC + struct.pack("<I", VERSION) + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(blob)


def load_checkpoint(path):
    """Returns (meta, tensors) with every tensor upcast to float64."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    body = blob[8:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != stored_crc:
        raise ValueError(f"{path}: checkpoint failed its checksum")
    offset = 0

    def take(fmt):
        nonlocal offset
        out = struct.unpack_from(fmt, body, offset)
        offset += struct.calcsize(fmt)
        return out

    (meta_len,) = take("<Q")
    meta = json.loads(body[offset : offset + meta_len].decode())
    offset += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[offset : offset + name_len].decode()
        offset += name_len
        code, rank = take("<BB")
        if code not in _CODE_DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code} for tensor {name!r}")
        shape = take(f"<{rank}I")
        np_dtype = np.dtype(_CODE_DTYPES[code])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        arr = np.frombuffer(body, dtype=np_dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        offset += n_bytes
        if name in tensors:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = arr.reshape(shape).astype(np.float64)
    if offset != len(body):
        raise ValueError(f"{path}: trailing bytes after last tensor record")
    return meta, tensors
