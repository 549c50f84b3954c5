"""RXF1 tensor container: the one binary format for model weights and images.

Layout (all integers little-endian)::

    magic        4 bytes  b"RXF1"
    version      u32
    endianness   u8       0 = little
    n_tensors    u32
    meta_offset  u64      byte offset of the JSON trailer
    meta_length  u64
    table        n_tensors x (name_len u32, name utf-8, dtype u8, rank u32,
                              dims u64 x rank, payload_offset u64)
    payload      raw tensor bytes, each block 8-byte aligned
    trailer      UTF-8 JSON metadata
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

MAGIC = b"RXF1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_HEADER = struct.Struct("<4sIBIQQ")


class CheckpointError(ValueError):
    pass


def _pad8(n: int) -> int:
    return (-n) % 8


def dumps(tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> bytes:
    names = list(tensors)
    arrays = []
    for name in names:
        arr = np.asarray(tensors[name])
        if arr.dtype not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        # ascontiguousarray would promote 0-d arrays to 1-d
        arrays.append(np.array(arr, dtype=arr.dtype.newbyteorder("<"), order="C"))

    table_size = 0
    for name, arr in zip(names, arrays):
        table_size += 4 + len(name.encode()) + 1 + 4 + 8 * arr.ndim + 8
    offset = _HEADER.size + table_size
    offset += _pad8(offset)
    offsets = []
    for arr in arrays:
        offsets.append(offset)
        offset += arr.nbytes + _pad8(arr.nbytes)
    meta = json.dumps(metadata or {}, sort_keys=True).encode()

    out = bytearray(_HEADER.pack(MAGIC, VERSION, 0, len(names), offset, len(meta)))
    for name, arr, off in zip(names, arrays, offsets):
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BI", DTYPE_CODES[arr.dtype.newbyteorder("=")], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += struct.pack("<Q", off)
    out += b"\0" * _pad8(len(out))
    for arr in arrays:
        out += arr.tobytes()
        out += b"\0" * _pad8(arr.nbytes)
    out += meta
    return bytes(out)


def loads(buf: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(buf) < _HEADER.size:
        raise CheckpointError("truncated header")
    magic, version, endian, n, meta_off, meta_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version > VERSION:
        raise CheckpointError(f"unsupported container version {version} (this reader knows <= {VERSION})")
    if endian != 0:
        raise CheckpointError("only little-endian containers are supported")
    pos = _HEADER.size
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        code, rank = struct.unpack_from("<BI", buf, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if code not in DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dt = DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        if off + count * dt.itemsize > len(buf):
            raise CheckpointError(f"tensor {name!r}: payload out of bounds")
        tensors[name] = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).astype(dt.newbyteorder("="))
    meta = json.loads(buf[meta_off:meta_off + meta_len].decode()) if meta_len else {}
    return tensors, meta


def save(path: Union[str, Path], tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, metadata))


def load(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
