"""Binary 8-bit PGM (P5) read/write."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map floats in [0, 1] to uint8 with round-half-even."""
    return np.rint(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(values: np.ndarray) -> bytes:
    arr = values if values.dtype == np.uint8 else to_bytes(values)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def write_pgm(path: str | Path, values: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(encode_pgm(values))
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None or int(m.group(3)) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 image")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end())
    return pixels.reshape(h, w).copy()
