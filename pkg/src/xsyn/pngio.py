"""Lossless PNG round-trip between uint8 files and float32 [0,1] arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

_F32_INV255 = np.float32(1.0 / 255.0)
_F32_255 = np.float32(255.0)


def load_png(path: str | Path) -> np.ndarray:
    """(H, W, 3) float32 in [0,1]."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return rgb.astype(np.float32) * _F32_INV255


def save_png(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=-1)
    data = np.rint(np.clip(arr, 0.0, 1.0) * _F32_255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")
