"""Binary tensor file format.

Layout (all little-endian):

    magic   4 bytes  "QETF"
    version u32      currently 1
    dtype   u32      1 = f32, 2 = f64, 3 = i8, 4 = i32
    ndim    u32
    dims    ndim x u64
    payload row-major values

Round trips are bit-exact. Parse errors report the file and byte offset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

__all__ = ["TensorFileError", "write_tensor", "read_tensor", "read_tensor_header",
           "MAGIC", "VERSION"]

MAGIC = b"QETF"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("int8"): 3,
    np.dtype("<i4"): 4,
}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"),
                3: np.dtype("int8"), 4: np.dtype("<i4")}


class TensorFileError(InvalidInputError):
    """Malformed tensor file; carries the byte offset of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    arr = arr.astype(dtype, copy=False)
    if arr.dtype not in _DTYPE_CODES:
        raise InvalidInputError(f"unsupported tensor dtype {arr.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", _DTYPE_CODES[arr.dtype]))
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int, path, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(n)
    if len(data) != n:
        raise TensorFileError(path, offset,
                              f"truncated while reading {what} ({len(data)}/{n} bytes)")
    return data


def _open(path):
    try:
        return open(path, "rb")
    except OSError as exc:
        raise TensorFileError(path, 0, f"cannot open: {exc}") from exc


def read_tensor_header(path) -> tuple[np.dtype, tuple[int, ...]]:
    """Parse just the header; used to validate shapes before loading."""
    path = Path(path)
    with _open(path) as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != MAGIC:
            raise TensorFileError(path, 0, f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != VERSION:
            raise TensorFileError(path, 4, f"unsupported version {version}")
        (code,) = struct.unpack("<I", _read_exact(fh, 4, path, "dtype"))
        if code not in _CODE_DTYPES:
            raise TensorFileError(path, 8, f"unknown dtype code {code}")
        (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path, "ndim"))
        if ndim > 8:
            raise TensorFileError(path, 12, f"implausible ndim {ndim}")
        dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path, "dims"))
    return _CODE_DTYPES[code], tuple(int(d) for d in dims)


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != MAGIC:
            raise TensorFileError(path, 0, f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != VERSION:
            raise TensorFileError(path, 4, f"unsupported version {version}")
        (code,) = struct.unpack("<I", _read_exact(fh, 4, path, "dtype"))
        if code not in _CODE_DTYPES:
            raise TensorFileError(path, 8, f"unknown dtype code {code}")
        (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path, "ndim"))
        if ndim > 8:
            raise TensorFileError(path, 12, f"implausible ndim {ndim}")
        dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path, "dims"))
        dtype = _CODE_DTYPES[code]
        count = 1
        for d in dims:
            count *= d
        payload_offset = fh.tell()
        payload = _read_exact(fh, count * dtype.itemsize, path, "payload")
        trailing = fh.read(1)
        if trailing:
            raise TensorFileError(path, payload_offset + len(payload),
                                  "trailing bytes after payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
