"""PPM (P6) and raw float32 plane files ("C4DI" header)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .numeric import FormatError

RAW_MAGIC = b"C4DI"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    h, w = rgb.shape[:2]
    data = rgb if rgb.dtype == np.uint8 else to_uint8(rgb)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns float64 RGB in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM: {tokens[0]!r}", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    if maxval != 255:
        raise FormatError("only 8-bit PPM is supported", pos)
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError("truncated PPM pixel data", len(data))
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_raw(path, planes: np.ndarray) -> None:
    a = np.asarray(planes, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    h, w, c = a.shape
    Path(path).write_bytes(RAW_MAGIC + struct.pack("<III", h, w, c)
                           + np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_raw(path) -> np.ndarray:
    """Returns (H, W, C) float32."""
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise FormatError(f"bad raw magic {data[:4]!r}", 0)
    if len(data) < 16:
        raise FormatError("truncated raw header", len(data))
    h, w, c = struct.unpack("<III", data[4:16])
    need = 16 + 4 * h * w * c
    if len(data) != need:
        raise FormatError(f"raw payload has {len(data)} bytes, expected {need}", min(len(data), need))
    return np.frombuffer(data[16:], dtype="<f4").reshape(h, w, c).copy()
