"""Binary PGM (P5) reading and writing.

Samples are one byte when maxval < 256 and two big-endian bytes otherwise.
"""

from __future__ import annotations

import numpy as np

from .errors import LoadError


def _tokens(data: bytes, count: int, path):
    """Read ``count`` header tokens; returns (tokens, offset of raster)."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise LoadError("truncated PGM header", path)
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def decode_pgm(data: bytes, path=None):
    """Returns (uint8 or uint16 array of shape (h, w), maxval)."""
    tokens, offset = _tokens(data, 4, path)
    if tokens[0] != b"P5":
        raise LoadError(f"not a binary PGM (magic {tokens[0]!r})", path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise LoadError("malformed PGM header", path) from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise LoadError(f"bad PGM dimensions {width}x{height} maxval {maxval}", path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = data[offset:offset + need]
    if len(raster) < need:
        raise LoadError(f"PGM raster truncated ({len(raster)} of {need} bytes)", path)
    img = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return img.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read(), path)


def encode_pgm(img: np.ndarray, maxval: int = 255) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {img.shape}")
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + np.clip(img, 0, maxval).astype(dtype).tobytes()


def write_pgm(path, img: np.ndarray, maxval: int = 255):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img, maxval))


def to_unit(img: np.ndarray, maxval: int) -> np.ndarray:
    return img.astype(np.float64) / maxval


def from_unit(img: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Quantize values in [0, 1] to integers in [0, maxval] (round half to even)."""
    return np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint16 if maxval > 255 else np.uint8)
