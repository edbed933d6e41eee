"""Binary PPM (P6) and PGM (P5) encoding with maxval 255."""

from __future__ import annotations

import re

import numpy as np

_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


class PnmParseError(ValueError):
    pass


def _quantize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("image contains non-finite values")
    if values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
        raise ValueError(f"image values must lie in [0, 1], got range [{values.min()}, {values.max()}]")
    return np.round(values * 255.0).astype(np.uint8)


def write_ppm(image) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + _quantize(image).tobytes()


def write_pgm(gray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs an H x W map, got shape {gray.shape}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + _quantize(gray).tobytes()


def _parse(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    m = _HEADER.match(data)
    if m is None:
        raise PnmParseError(f"malformed header, expected magic {magic.decode()} followed by width, height, maxval")
    if m.group(1) != magic:
        raise PnmParseError(f"wrong magic {m.group(1).decode()}, expected {magic.decode()}")
    w, h, maxval = (int(m.group(i)) for i in (2, 3, 4))
    if w < 1 or h < 1:
        raise PnmParseError(f"invalid dimensions {w}x{h}")
    if maxval != 255:
        raise PnmParseError(f"unsupported maxval {maxval}, expected 255")
    payload = data[m.end():]
    expected = w * h * channels
    if len(payload) != expected:
        raise PnmParseError(f"payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def read_ppm(data: bytes) -> np.ndarray:
    return _parse(data, b"P6", 3)


def read_pgm(data: bytes) -> np.ndarray:
    return _parse(data, b"P5", 1)
