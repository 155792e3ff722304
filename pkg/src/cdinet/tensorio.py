"""Raw tensor files used throughout the repository.

Layout (all integers little-endian)::

    b"CDIT"            magic, 4 bytes
    version            u8  (currently 1)
    ndim               u8
    dims               ndim x u32
    dtype flag         u8  (4 = float32, 8 = float64)
    payload            row-major float data, little-endian
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CDIT"
VERSION = 1
_FLAGS = {4: "<f4", 8: "<f8"}


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr, bits=64):
    arr = np.asarray(arr)
    if bits not in (32, 64):
        raise ValueError("bits must be 32 or 64")
    if arr.ndim > 255:
        raise TensorFormatError("too many dimensions")
    flag = bits // 8
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", flag)
    return header + np.ascontiguousarray(arr, dtype=_FLAGS[flag]).tobytes()


def decode_tensor(buf):
    try:
        return _decode(buf)
    except struct.error as exc:
        raise TensorFormatError(f"truncated tensor header: {exc}") from exc


def _decode(buf):
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic bytes")
    version, ndim = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    off = 6
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    (flag,) = struct.unpack_from("<B", buf, off)
    off += 1
    if flag not in _FLAGS:
        raise TensorFormatError(f"unknown dtype flag {flag}")
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != count * flag:
        raise TensorFormatError(f"payload size {len(buf) - off} does not match dims {dims}")
    data = np.frombuffer(buf, dtype=_FLAGS[flag], count=count, offset=off)
    return data.astype(np.float64).reshape(dims)


def write_tensor(path, arr, bits=64):
    Path(path).write_bytes(encode_tensor(arr, bits))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())
