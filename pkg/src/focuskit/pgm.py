"""Binary PGM (P5) reading and writing for 8-bit and 16-bit grayscale images."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def read_pgm(path, normalize: bool = True) -> np.ndarray:
    """Read a binary PGM file.

    With ``normalize=True`` pixels are mapped to [0, 1] by dividing by the
    declared maxval.  With ``normalize=False`` the raw integer values are
    returned, which is the convention used for depth maps that store motor
    steps directly.
    """
    data = Path(path).read_bytes()
    magic, fields, offset = _parse_header(data)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    width, height, maxval = fields
    if maxval <= 0 or maxval > 65535:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    # 16-bit PGM samples are big-endian per the netpbm format.
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    if raster.size != count:
        raise ValueError(f"{path}: truncated raster")
    img = raster.reshape(height, width)
    if normalize:
        return img.astype(np.float64) / maxval
    return img.astype(np.int64)


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write an image as binary PGM.

    Float input is treated as [0, 1] and quantized against ``maxval``;
    integer input is written as-is (values must fit in ``maxval``).
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    if np.issubdtype(image.dtype, np.floating):
        quant = np.clip(np.rint(image * maxval), 0, maxval)
    else:
        if image.min() < 0 or image.max() > maxval:
            raise ValueError("integer image out of range for declared maxval")
        quant = image
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + quant.astype(dtype).tobytes())


def _parse_header(data: bytes):
    """Return (magic, (width, height, maxval), raster offset)."""
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("malformed PGM header")
        return data[start:pos]

    magic = token()
    fields = tuple(int(token()) for _ in range(3))
    pos += 1  # single whitespace byte separates maxval from the raster
    return magic, fields, pos
