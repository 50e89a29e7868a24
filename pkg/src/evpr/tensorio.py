"""Binary tensor dump format.

Layout: 4 dimensions as u32 little-endian, then the payload packed as
little-endian float32 in C order. Tensors of rank < 4 are padded with
trailing 1-dims on write; readers receive the full 4-d shape and squeeze
as appropriate for their context. The same encoding backs the feature
archive payloads, the subprocess provider protocol, and golden-file tests.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import TruncatedRecord

_HEADER = struct.Struct("<4I")


def packed_dims(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    """Pad a shape to exactly 4 dims with trailing 1s."""
    if len(shape) > 4:
        raise ValueError(f"tensor rank {len(shape)} > 4 not supported")
    return tuple(shape) + (1,) * (4 - len(shape))  # type: ignore[return-value]


def encode_tensor(array: np.ndarray) -> bytes:
    dims = packed_dims(array.shape)
    payload = np.ascontiguousarray(array, dtype="<f4")
    return _HEADER.pack(*dims) + payload.tobytes()


def decode_tensor(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``; returns (4-d array, next offset)."""
    end = offset + _HEADER.size
    if len(buf) < end:
        raise TruncatedRecord("tensor header truncated")
    dims = _HEADER.unpack_from(buf, offset)
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = count * 4
    if len(buf) < end + nbytes:
        raise TruncatedRecord(
            f"tensor payload truncated: need {nbytes} bytes, have {len(buf) - end}")
    array = np.frombuffer(buf, dtype="<f4", count=count, offset=end).reshape(dims)
    return array.copy(), end + nbytes


def write_tensor(dest: str | BinaryIO, array: np.ndarray) -> None:
    data = encode_tensor(array)
    if hasattr(dest, "write"):
        dest.write(data)  # type: ignore[union-attr]
    else:
        with open(dest, "wb") as fh:
            fh.write(data)


def read_tensor(src: str | BinaryIO) -> np.ndarray:
    if hasattr(src, "read"):
        data = src.read()  # type: ignore[union-attr]
    else:
        with open(src, "rb") as fh:
            data = fh.read()
    array, _ = decode_tensor(data)
    return array
