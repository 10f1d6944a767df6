"""Binary tensor container: magic "TNSR", u8 rank, u32-LE extents, float64 data."""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TNSR"


class ParseError(ValueError):
    """File-format violation, reported with the byte offset where it occurred."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def write_tensor(buf, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    buf.write(MAGIC)
    buf.write(struct.pack("<B", array.ndim))
    for extent in array.shape:
        buf.write(struct.pack("<I", extent))
    buf.write(np.ascontiguousarray(array).tobytes())


def read_tensor(buf) -> np.ndarray:
    start = buf.tell()
    magic = buf.read(4)
    if magic != MAGIC:
        raise ParseError(f"bad tensor magic {magic!r}", start)
    rank_raw = buf.read(1)
    if len(rank_raw) != 1:
        raise ParseError("truncated tensor header", buf.tell())
    rank = struct.unpack("<B", rank_raw)[0]
    ext_raw = buf.read(4 * rank)
    if len(ext_raw) != 4 * rank:
        raise ParseError("truncated tensor extents", buf.tell())
    shape = struct.unpack(f"<{rank}I", ext_raw) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = buf.read(8 * count)
    if len(data) != 8 * count:
        raise ParseError(f"truncated tensor data, expected {8 * count} bytes", buf.tell())
    return np.frombuffer(data, dtype="<f8").reshape(shape).copy()


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
