"""Minimal binary PGM/PPM (P5/P6) readers and writers.

Images are 8-bit P5 (gray) or P6 (color); label maps and probability dumps
are 16-bit P5 with big-endian sample order as required by the netpbm spec.
Probabilities map linearly onto [0, 65535].
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .errors import FileFormatError

PathLike = Union[str, Path]


def _read_header(fh) -> tuple[bytes, int, int, int]:
    def token():
        # skip whitespace and '#' comment lines between header fields
        tok = b""
        while True:
            ch = fh.read(1)
            if ch == b"":
                raise FileFormatError("truncated PNM header")
            if ch.isspace():
                if tok:
                    return tok
                continue
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                continue
            tok += ch

    magic = token()
    if magic not in (b"P5", b"P6"):
        raise FileFormatError(f"unsupported PNM magic {magic!r}")
    width = int(token())
    height = int(token())
    maxval = int(token())
    return magic, width, height, maxval


def read_pnm(path: PathLike) -> np.ndarray:
    """Read P5/P6 into an array: (H,W) for gray, (H,W,3) for color.

    Dtype is uint8 for maxval 255 and uint16 for larger maxvals.
    """
    with open(path, "rb") as fh:
        magic, width, height, maxval = _read_header(fh)
        channels = 3 if magic == b"P6" else 1
        if maxval <= 255:
            dtype, itemsize = np.dtype(">u1"), 1
        elif maxval <= 65535:
            dtype, itemsize = np.dtype(">u2"), 2
        else:
            raise FileFormatError(f"{path}: maxval {maxval} out of range")
        count = width * height * channels
        raw = fh.read(count * itemsize)
        if len(raw) != count * itemsize:
            raise FileFormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=dtype).astype(
        np.uint8 if itemsize == 1 else np.uint16
    )
    if channels == 3:
        return arr.reshape(height, width, 3)
    return arr.reshape(height, width)


def _write_header(fh, magic: bytes, width: int, height: int, maxval: int) -> None:
    fh.write(magic + b"\n" + f"{width} {height}\n{maxval}\n".encode())


def write_pgm8(path: PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise FileFormatError("pgm8 expects a 2-D array")
    with open(path, "wb") as fh:
        _write_header(fh, b"P5", img.shape[1], img.shape[0], 255)
        fh.write(np.clip(img, 0, 255).astype(">u1").tobytes())


def write_pgm16(path: PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise FileFormatError("pgm16 expects a 2-D array")
    with open(path, "wb") as fh:
        _write_header(fh, b"P5", img.shape[1], img.shape[0], 65535)
        fh.write(np.clip(img, 0, 65535).astype(">u2").tobytes())


def write_ppm8(path: PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FileFormatError("ppm8 expects an (H,W,3) array")
    with open(path, "wb") as fh:
        _write_header(fh, b"P6", img.shape[1], img.shape[0], 255)
        fh.write(np.clip(img, 0, 255).astype(">u1").tobytes())


def write_prob_pgm(path: PathLike, prob: np.ndarray) -> None:
    """Write a probability map in [0,1] as 16-bit P5 (value = prob * 65535)."""
    p = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    write_pgm16(path, np.rint(p * 65535.0).astype(np.uint16))


def read_prob_pgm(path: PathLike) -> np.ndarray:
    """Read a 16-bit P5 probability map back into float64 [0,1]."""
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise FileFormatError(f"{path}: expected grayscale probability map")
    return arr.astype(np.float64) / 65535.0
