"""Small image I/O helpers: binary PGM (8/16-bit) and PNG export.

Float images are assumed to live in [0, 1] and are quantised on write.
16-bit PGM is the default for dataset storage so training data survives the
round trip with ~1.5e-5 quantisation error.
"""

from __future__ import annotations

import numpy as np

__all__ = ["write_pgm", "read_pgm", "write_png", "to_uint"]


def to_uint(image: np.ndarray, maxval: int) -> np.ndarray:
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    q = np.rint(arr * maxval)
    return q.astype(np.uint8 if maxval < 256 else ">u2")


def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    q = to_uint(image, maxval)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM back to floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    # Header: magic, width, height, maxval; tokens may be comment-separated.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = tokens
    dtype = np.uint8 if maxval < 256 else ">u2"
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return raw.reshape(h, w).astype(float) / maxval


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint(image, 255), mode="L").save(path)
