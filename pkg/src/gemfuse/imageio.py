"""8-bit PNG I/O for (C, H, W) float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

PNG_COMPRESS_LEVEL = 6


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize with round-half-away-from-zero (values are non-negative)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    q = arr if arr.dtype == np.uint8 else to_uint8(arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(q)).save(path, format="PNG", compress_level=PNG_COMPRESS_LEVEL, optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0
