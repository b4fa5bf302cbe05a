"""Binary PGM (P5) and PPM (P6) writers/readers, 8-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_u8(unit: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to 0..255 with round-half-up."""
    return np.floor(np.clip(unit, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def write_ppm(path: str | Path, img: np.ndarray) -> Path:
    """``img`` is H x W x 3 uint8."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("write_ppm expects an H x W x 3 uint8 array")
    h, w, _ = img.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())
    return path


def read_pnm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError("only 8-bit images are supported")
    data = np.frombuffer(body, dtype=np.uint8)
    if magic == b"P5":
        return data.reshape(h, w)
    if magic == b"P6":
        return data.reshape(h, w, 3)
    raise ValueError(f"unsupported magic {magic!r}")
