"""Pixel-grid helpers: pooling, upsampling, box rasterization.

Pooling accumulates tile elements in row-major offset order in float32 so
independent implementations can reproduce results bit-for-bit.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

Box = tuple[float, float, float, float]


def average_pool(plane: np.ndarray, factor: int) -> np.ndarray:
    """Mean over factor x factor tiles of a 2-D float32 plane."""
    h, w = plane.shape
    if h % factor or w % factor:
        raise ValueError(f"dims ({h},{w}) not divisible by {factor}")
    plane = plane.astype(np.float32, copy=False)
    acc = np.zeros((h // factor, w // factor), dtype=np.float32)
    for dy in range(factor):
        for dx in range(factor):
            acc += plane[dy::factor, dx::factor]
    return acc * np.float32(1.0 / (factor * factor))


def upsample_nearest(arr: np.ndarray, factor: int) -> np.ndarray:
    """Repeat each cell factor times along the two leading axes."""
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def rasterize_box(box: Box, width: int, height: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the box."""
    x1, y1, x2, y2 = box
    cols = np.arange(width, dtype=np.float64) + 0.5
    rows = np.arange(height, dtype=np.float64) + 0.5
    in_x = (cols >= x1) & (cols < x2)
    in_y = (rows >= y1) & (rows < y2)
    return in_y[:, None] & in_x[None, :]


def boxes_union_mask(boxes: Iterable[Box], width: int, height: int) -> np.ndarray:
    """float32 {0,1} mask covering the union of the boxes."""
    mask = np.zeros((height, width), dtype=bool)
    for box in boxes:
        mask |= rasterize_box(box, width, height)
    return mask.astype(np.float32)


def tight_bbox(mask: np.ndarray) -> Box | None:
    """Tight [x1,y1,x2,y2] around set pixels; None for an empty mask.

    A pixel at (row r, col c) spans [c, c+1] x [r, r+1], so a single set
    pixel yields a unit-area box.
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return (
        float(cols.min()),
        float(rows.min()),
        float(cols.max() + 1),
        float(rows.max() + 1),
    )


def box_area(box: Box) -> float:
    return (box[2] - box[0]) * (box[3] - box[1])


def boxes_touch_or_overlap(a: Box, b: Box) -> bool:
    """Closed-box intersection test; shared edges and corners count."""
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


def validate_latent(arr: np.ndarray, dims: Sequence[int] | None = None) -> np.ndarray:
    """Assert a float32, finite tensor (optionally of given dims)."""
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise ValueError(f"expected float32 tensor, got {arr.dtype}")
    if dims is not None and tuple(arr.shape) != tuple(dims):
        raise ValueError(f"expected dims {tuple(dims)}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("tensor contains non-finite values")
    return arr
