"""Binary tensor container (``.flgt``) and model container (``.flgm``).

Layout of a ``.flgt`` record (all little-endian)::

    magic   4 bytes  b"FLGT"
    version u16      currently 1
    dtype   u8       0=f32, 1=f64, 2=u8
    rank    u8
    dims    rank x u32
    payload row-major values

A ``.flgm`` file is ``b"FLGM"``, a u16 version, a u32 header length, a UTF-8
JSON header, then one ``.flgt`` record per parameter tensor in header order.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"FLGT"
MODEL_MAGIC = b"FLGM"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class ContainerError(ValueError):
    """Base class for malformed container files."""


class BadMagicError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class DtypeError(ContainerError):
    """Unknown dtype code on read, unsupported dtype on write, or a dtype mismatch."""


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(buf)}")
    return buf


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise DtypeError(f"unsupported dtype {array.dtype}; use float32, float64 or uint8")
    if array.ndim > 255:
        raise ContainerError("rank exceeds 255")
    header = TENSOR_MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes(order="C")
    return header + payload


def _read_tensor_from(fh: BinaryIO, expect_dtype=None) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version, code, rank = struct.unpack("<HBB", _read_exact(fh, 4))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    if code not in _DTYPES:
        raise DtypeError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    if expect_dtype is not None and np.dtype(expect_dtype) != dtype.newbyteorder("="):
        raise DtypeError(f"file holds {dtype}, caller expected {np.dtype(expect_dtype)}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dtype.itemsize)
    out = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return out.astype(dtype.newbyteorder("="), copy=True)


def decode_tensor(data: bytes, expect_dtype=None) -> np.ndarray:
    fh = io.BytesIO(data)
    out = _read_tensor_from(fh, expect_dtype)
    if fh.read(1):
        raise ContainerError("trailing bytes after tensor payload")
    return out


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: str | Path, expect_dtype=None) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), expect_dtype)


def write_model(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a model file; parameter order follows ``tensors`` insertion order."""
    header = dict(header)
    header["parameters"] = list(tensors)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<HI", VERSION, len(blob)))
        fh.write(blob)
        for name in tensors:
            fh.write(encode_tensor(tensors[name]))


def read_model(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != MODEL_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        version, length = struct.unpack("<HI", _read_exact(fh, 6))
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported model version {version}")
        header = json.loads(_read_exact(fh, length).decode("utf-8"))
        tensors = {name: _read_tensor_from(fh) for name in header["parameters"]}
        if fh.read(1):
            raise ContainerError("trailing bytes after model parameters")
    return header, tensors
