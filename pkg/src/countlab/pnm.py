"""Binary netpbm (P5/P6, maxval 255) reading and writing."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(rb"^(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def to_bytes(pixels: np.ndarray) -> bytes:
    """Encode a [0, 1] grayscale (H, W) or RGB (H, W, 3) array."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + data.tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    m = _HEADER.match(buf)
    if m is None:
        raise ValueError("not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    body = buf[m.end():]
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    n = int(np.prod(shape))
    if len(body) != n:
        raise ValueError(f"expected {n} bytes of pixel data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(shape).astype(np.float64) / 255.0


def write(path, pixels: np.ndarray) -> bytes:
    data = to_bytes(pixels)
    Path(path).write_bytes(data)
    return data


def read(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
