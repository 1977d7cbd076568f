"""Binary tensor format (RTEN) and the byte-level helpers shared by the
checkpoint (R2MT) and gallery (R2GX) files.

RTEN layout, little-endian throughout::

    b"RTEN" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank
    | rank x u32 dims | row-major payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .exceptions import BadMagicError, FormatError, TruncatedFileError, UnsupportedVersionError

RTEN_MAGIC = b"RTEN"
RTEN_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def check_header(fh: BinaryIO, magic: bytes, versions: set[int]) -> int:
    got = fh.read(len(magic))
    if len(got) < len(magic) and magic.startswith(got):
        raise TruncatedFileError(f"truncated file: {len(got)} bytes of {magic.decode()} header")
    if got != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {got!r}")
    (version,) = struct.unpack("<B", read_exact(fh, 1))
    if version not in versions:
        raise UnsupportedVersionError(f"unsupported version {version} for {magic.decode()}")
    return version


def write_rten(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    try:
        code = _CODES[array.dtype]
    except KeyError:
        raise FormatError(f"RTEN stores float32/float64 only, got {array.dtype}") from None
    if array.ndim > 255:
        raise FormatError("rank too large for RTEN")
    fh.write(RTEN_MAGIC + struct.pack("<BBB", RTEN_VERSION, code, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def read_rten(fh: BinaryIO) -> np.ndarray:
    check_header(fh, RTEN_MAGIC, {RTEN_VERSION})
    code, rank = struct.unpack("<BB", read_exact(fh, 2))
    if code not in _DTYPES:
        raise FormatError(f"unknown RTEN dtype code {code}")
    dims = struct.unpack(f"<{rank}I", read_exact(fh, 4 * rank))
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    payload = read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def rten_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_rten(buf, array)
    return buf.getvalue()


def save_rten(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_rten(fh, array)


def load_rten(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_rten(fh)
