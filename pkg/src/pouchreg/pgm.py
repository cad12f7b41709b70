"""Binary PGM (P5) reading and writing.

Images are normalized to [0, 1] on read by dividing by the header maxval.
Masks are written with maxval 255 and values {0, 255}; any nonzero sample
reads back as foreground.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    out: list[int] = []
    pos = 0
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        out.append(int(buf[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read_raw(path) -> tuple[np.ndarray, int]:
    """Return the raw integer raster and its maxval."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (P5) file")
    try:
        (width, height, maxval), offset = _tokens(buf[2:], 3)
    except ValueError as exc:
        raise PGMError(f"{path}: bad PGM header") from exc
    offset += 2
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise PGMError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    size = width * height * dtype.itemsize
    raster = buf[offset : offset + size]
    if len(raster) < size:
        raise PGMError(f"{path}: truncated raster")
    data = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return data.astype(np.int64), maxval


def read_image(path) -> np.ndarray:
    data, maxval = read_raw(path)
    return data / float(maxval)


def read_mask(path) -> np.ndarray:
    data, _ = read_raw(path)
    return data != 0


def write_raw(path, data: np.ndarray, maxval: int) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise PGMError("PGM rasters must be 2-D")
    height, width = data.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + data.astype(dtype).tobytes())


def write_image(path, img: np.ndarray, bits: int = 16) -> None:
    """Write an image in [0, 1], clipping and rounding to 8 or 16 bits."""
    if bits not in (8, 16):
        raise PGMError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    write_raw(path, np.rint(img * maxval), maxval)


def write_mask(path, mask: np.ndarray) -> None:
    write_raw(path, (np.asarray(mask) != 0) * 255, 255)
