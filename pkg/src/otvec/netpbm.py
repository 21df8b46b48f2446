"""Binary Netpbm (PGM P5 / PPM P6) reading and writing.

Pixels map linearly to mass per cell: sample / maxval, so values land in
[0, 1].  Grayscale images produce one channel, color images three (R, G, B).
Row-major with the top-left pixel first, which matches the array layout
(y row index increasing downward).  Writing with ``maxval`` 255 or 65535 is
bit-exact invertible for fields that came from an image of the same depth.
"""
from __future__ import annotations

import numpy as np


def _read_token(data: bytes, pos: int):
    """Next whitespace-delimited token after ``pos``, skipping # comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated header")
    return data[start:pos], pos


def read_netpbm(path):
    """Read a binary PGM/PPM file.

    Returns (planes, maxval) where ``planes`` is float64 of shape
    (1, ny, nx) for P5 or (3, ny, nx) for P6, values in [0, 1].
    """
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        magic, pos = _read_token(data, 0)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported magic {magic!r} (want binary P5 or P6)")
        w_tok, pos = _read_token(data, pos)
        h_tok, pos = _read_token(data, pos)
        m_tok, pos = _read_token(data, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise ValueError(f"malformed netpbm header in {path}: {exc}") from None
    if width < 1 or height < 1:
        raise ValueError(f"bad image size {width}x{height} in {path}")
    if maxval not in (255, 65535):
        raise ValueError(f"unsupported maxval {maxval} in {path} (want 255 or 65535)")
    pos += 1  # single whitespace byte between maxval and the raster
    n_ch = 1 if magic == b"P5" else 3
    count = width * height * n_ch
    dtype = np.dtype(np.uint8) if maxval == 255 else np.dtype(">u2")
    if len(data) - pos < count * dtype.itemsize:
        raise ValueError(f"truncated raster in {path}: expected {count} samples")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    arr = raster.astype(np.float64) / maxval
    if n_ch == 1:
        return arr.reshape(1, height, width), maxval
    return np.moveaxis(arr.reshape(height, width, 3), 2, 0).copy(), maxval


def write_netpbm(path, planes: np.ndarray, maxval: int = 255) -> None:
    """Write planes in [0, 1] as binary PGM (1 channel) or PPM (3 channels)."""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim == 2:
        planes = planes[None]
    if planes.ndim != 3 or planes.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, ny, nx) planes, got shape {planes.shape}")
    if maxval not in (255, 65535):
        raise ValueError(f"unsupported maxval {maxval} (want 255 or 65535)")
    if not np.isfinite(planes).all():
        raise ValueError("non-finite pixel values")
    n_ch, height, width = planes.shape
    samples = np.rint(np.clip(planes, 0.0, 1.0) * maxval)
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    if n_ch == 3:
        samples = np.moveaxis(samples, 0, 2)  # interleave to (ny, nx, 3)
    magic = b"P5" if n_ch == 1 else b"P6"
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(samples.astype(dtype).tobytes())


def read_density_image(path) -> np.ndarray:
    """Image as per-channel mass-per-cell planes, shape (C, ny, nx) in [0, 1]."""
    planes, _ = read_netpbm(path)
    return planes
