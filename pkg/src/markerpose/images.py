"""Image array conventions and binary PGM (P5) I/O.

Grayscale frames are ``uint8`` arrays of shape ``(height, width)``; binary
masks are ``bool`` arrays of the same shape.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import SchemaError

GrayImage = np.ndarray
BinaryImage = np.ndarray


def as_gray(img: np.ndarray) -> GrayImage:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise SchemaError("image", f"expected 2-D grayscale array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise SchemaError("image", f"expected uint8 pixels, got {arr.dtype}")
    return arr


def write_pgm(path: str | Path, img: GrayImage) -> None:
    img = as_gray(img)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def pgm_bytes(img: GrayImage) -> bytes:
    img = as_gray(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(path: str | Path) -> GrayImage:
    with open(path, "rb") as f:
        data = f.read()
    return parse_pgm(data, str(path))


def parse_pgm(data: bytes, source: str = "<bytes>") -> GrayImage:
    if not data.startswith(b"P5"):
        raise SchemaError(source, "not a binary PGM (P5) file")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SchemaError(source, "truncated PGM header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError as exc:
            raise SchemaError(source, f"bad PGM header token {data[start:pos]!r}") from exc
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise SchemaError(source, f"only 8-bit PGM supported, maxval {maxval}")
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise SchemaError(source, f"expected {w * h} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
