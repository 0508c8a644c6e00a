"""Binary PPM (P6) and PGM (P5) reading and writing for 8-bit rasters."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


class PNMError(ValueError):
    pass


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise PNMError(f"PPM needs an (h, w, 3) uint8 array, got {pixels.shape}")
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise PNMError(f"PGM needs an (h, w) uint8 array, got {pixels.shape}")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def _header(data: bytes, magic: bytes, source) -> tuple[int, int, int]:
    if not data.startswith(magic):
        raise PNMError(f"{source}: expected {magic.decode()} magic number")
    tokens, pos = [], len(magic)
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PNMError(f"{source}: truncated header")
        tokens.append(int(data[start:pos]))
    w, h, maxval = tokens
    if maxval != 255:
        raise PNMError(f"{source}: only 8-bit rasters are supported (maxval {maxval})")
    return w, h, pos + 1


def decode_ppm(data: bytes, source="<bytes>") -> np.ndarray:
    w, h, off = _header(data, b"P6", source)
    body = data[off:]
    if len(body) != w * h * 3:
        raise PNMError(f"{source}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def decode_pgm(data: bytes, source="<bytes>") -> np.ndarray:
    w, h, off = _header(data, b"P5", source)
    body = data[off:]
    if len(body) != w * h:
        raise PNMError(f"{source}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    return decode_ppm(path.read_bytes(), path)


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    return decode_pgm(path.read_bytes(), path)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
