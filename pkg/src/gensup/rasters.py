"""Dependency-free raster IO: binary PPM (rgb), PGM (mask), PFM (depth).

PFM payload is little-endian float32 with the conventional bottom-to-top row
order and a negative scale marker. Quantization for PPM is floor(x*255+0.5).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H,W,3), got {rgb.shape}")
    h, w, _ = rgb.shape
    data = np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Returns float32 in [0,1]."""
    with open(path, "rb") as f:
        magic, dims, maxval = _read_header(f, 3)
        if magic != "P6":
            raise ValueError(f"{path}: not a binary PPM ({magic})")
        w, h = dims
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return (raw.reshape(h, w, 3).astype(np.float32)) / float(maxval)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    if gray.ndim != 2:
        raise ValueError(f"expected (H,W), got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, dims, _ = _read_header(f, 3)
        if magic != "P5":
            raise ValueError(f"{path}: not a binary PGM ({magic})")
        w, h = dims
        raw = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return raw.reshape(h, w).copy()


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    if data.ndim != 2:
        raise ValueError(f"expected (H,W), got {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_token(f)
        w = int(_read_token(f))
        h = int(_read_token(f))
        scale = float(_read_token(f))
        if magic != "Pf":
            raise ValueError(f"{path}: not a grayscale PFM ({magic})")
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(f.read(w * h * 4), dtype=dtype)
    return raw.reshape(h, w)[::-1].astype(np.float32)


def _read_token(f) -> str:
    tok = b""
    ch = f.read(1)
    while ch.isspace():
        ch = f.read(1)
    while ch and not ch.isspace():
        tok += ch
        ch = f.read(1)
    return tok.decode("ascii")


def _read_header(f, n_tokens: int):
    magic = _read_token(f)
    w = int(_read_token(f))
    h = int(_read_token(f))
    maxval = int(_read_token(f))
    return magic, (w, h), maxval
