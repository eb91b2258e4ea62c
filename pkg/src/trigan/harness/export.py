"""Binary PGM (P5) export of images in [-1, 1]."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Affine map [-1, 1] -> 0..255, rounded and clipped."""
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> Path:
    """Write a 2-D image (or (1, H, W)) with values in [-1, 1] as 8-bit PGM."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"write_pgm: expected a single-channel image, got shape {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes(img).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Read a P5 file written by :func:`write_pgm`; returns uint8 (H, W)."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = raw[len(raw) - w * h :]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def montage(images: np.ndarray, cols: int = 8, pad: int = 2, fill: float = -1.0) -> np.ndarray:
    """Tile ``(N, 1, H, W)`` images into one grid image."""
    images = np.asarray(images)
    n, _, h, w = images.shape
    rows = max(1, math.ceil(n / cols))
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y : y + h, x : x + w] = images[i, 0]
    return grid


def write_montage(images: np.ndarray, path, cols: int = 8) -> Path:
    return write_pgm(montage(images[: cols * cols], cols=cols), path)
