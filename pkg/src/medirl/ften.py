"""FTEN binary tensor files.

Layout (all little-endian)::

    b"FTEN" | version u16 | dtype u8 | ndim u8 | dims u32 * ndim | count u64 | payload

dtype 1 is float32; dtype 2 (float64) is used for checkpoints so that
parameters survive a save/load cycle exactly. Payload is row-major.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

MAGIC = b"FTEN"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {v: k for k, v in DTYPES.items()}


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensor(x: np.ndarray, dtype_code: int = 1) -> bytes:
    if dtype_code not in DTYPES:
        raise TensorFormatError(f"unsupported dtype code {dtype_code}")
    # ascontiguousarray would promote a 0-d array to shape (1,)
    x = np.array(x, dtype=DTYPES[dtype_code], order="C")
    if x.ndim > 255:
        raise TensorFormatError("too many dimensions")
    header = MAGIC + struct.pack("<HBB", VERSION, dtype_code, x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape) + struct.pack("<Q", x.size)
    return header + x.tobytes(order="C")


def decode_tensor(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    if len(buf) < 8:
        raise TensorFormatError(f"{name}: truncated header")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"{name}: bad magic {buf[:4]!r}")
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"{name}: unsupported version {version}")
    if code not in DTYPES:
        raise TensorFormatError(f"{name}: bad dtype code {code}")
    offset = 8 + 4 * ndim + 8
    if len(buf) < offset:
        raise TensorFormatError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    (count,) = struct.unpack_from("<Q", buf, 8 + 4 * ndim)
    if int(np.prod(dims, dtype=np.int64)) != count:
        raise TensorFormatError(f"{name}: length mismatch, dims {dims} vs {count} elements")
    dtype = DTYPES[code]
    payload = len(buf) - offset
    if payload != count * dtype.itemsize:
        raise TensorFormatError(
            f"{name}: length mismatch, header declares {count} elements, payload holds "
            f"{payload / dtype.itemsize:g}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims).copy()


def write_tensor(path, x: np.ndarray, dtype_code: int = 1) -> None:
    atomic_write_bytes(path, encode_tensor(x, dtype_code))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise TensorFormatError(f"{path}: no such tensor file") from None
    return decode_tensor(buf, str(path))
