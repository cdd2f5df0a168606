"""".dft" binary tensor files.

Layout: magic ``DFT1`` (4 bytes), u8 rank, rank little-endian u32 extents,
then float64 little-endian values in row-major order.  Used for checkpoints
and prediction dumps.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FileFormatError

MAGIC = b"DFT1"


def write_dft(path: Union[str, Path], array) -> None:
    """Write a rank-1..4 array (or anything array-like) as a .dft file."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 4:
        raise FileFormatError(f"dft supports rank 1..4, got rank {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_dft(path: Union[str, Path]) -> np.ndarray:
    """Read a .dft file back into a float64 ndarray."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<B", fh.read(1))
        if not 1 <= rank <= 4:
            raise FileFormatError(f"{path}: unsupported rank {rank}")
        extents = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(extents))
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise FileFormatError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype="<f8").reshape(extents).astype(np.float64)
