"""Scripted mock generators, implemented from PROTOCOL.md section 5.

Arithmetic follows the document to the letter: hash-counter value noise,
scaled-linear schedule in float64, pyramid attention bumps, fixed-order
float32 pooling, and level/threshold segmentation. Responses must be
byte-identical to any other conforming implementation.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
from scipy import ndimage

DOWNSCALE_DEFAULT = 8
TIMESTEPS_DEFAULT = 1000
BETA_START = 0.00085
BETA_END = 0.012
AUTO_LEVEL_LIMIT = 64

F32 = np.float32
HALF = F32(0.5)
THIRD = F32(1.0 / 3.0)
TWO_THIRDS = F32(2.0 / 3.0)


class RequestRejected(ValueError):
    """Maps to BAD_REQUEST."""


class WrongDims(ValueError):
    """Maps to DIMS_MISMATCH."""


# -- 5.1 value noise stream ---------------------------------------------------


def value_noise(tag: str, shape: tuple[int, ...]) -> np.ndarray:
    count = 1
    for dim in shape:
        count *= dim
    seed = hashlib.sha256(tag.encode("utf-8")).digest()
    words = bytearray()
    for block in range((count + 3) // 4):
        words += hashlib.sha256(seed + struct.pack("<Q", block)).digest()
    lanes = np.frombuffer(bytes(words), dtype="<u8")[:count]
    uniform = (lanes >> np.uint64(11)).astype(np.float64) * (2.0**-53)
    return (2.0 * uniform - 1.0).astype(np.float32).reshape(shape)


# -- 5.2 schedule -------------------------------------------------------------


def alphas_cumprod(timesteps: int) -> np.ndarray:
    if timesteps == 1:
        betas = np.array([BETA_START], dtype=np.float64)
    else:
        frac = np.arange(timesteps, dtype=np.float64) / (timesteps - 1)
        root = np.sqrt(BETA_START) + frac * (np.sqrt(BETA_END) - np.sqrt(BETA_START))
        betas = root * root
    return np.cumprod(1.0 - betas)


# -- 5.3 request digest -------------------------------------------------------


def canonical(value) -> bytes:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def request_digest(op: str, payload: dict) -> str:
    return hashlib.sha256(canonical({"op": op, "payload": payload})).hexdigest()


# -- 5.4 denoise --------------------------------------------------------------


def predicted_noise(digest: str, shape: tuple[int, int, int]) -> np.ndarray:
    return value_noise(f"eps|{digest}", shape)


def attention_map(box, step: int, height: int, width: int) -> np.ndarray:
    x1, y1, x2, y2 = (float(v) for v in box)
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    rx, ry = (x2 - x1) / 2.0, (y2 - y1) / 2.0
    du = (np.arange(width, dtype=np.float64) + 0.5 - cx) / rx
    dv = (np.arange(height, dtype=np.float64) + 0.5 - cy) / ry
    pyramid = np.maximum(0.0, 1.0 - np.maximum(np.abs(dv)[:, None], np.abs(du)[None, :]))
    weight = 0.5 + 0.5 * ((step * 2654435761) % 4096) / 4096.0
    return (pyramid * weight).astype(np.float32)


# -- 5.5 / 5.6 codec ----------------------------------------------------------


def _pool(plane: np.ndarray, factor: int) -> np.ndarray:
    height, width = plane.shape
    acc = np.zeros((height // factor, width // factor), dtype=np.float32)
    for dy in range(factor):
        for dx in range(factor):
            acc += plane[dy::factor, dx::factor]
    return acc * F32(1.0 / (factor * factor))


def encode_pixels(pixels: np.ndarray, factor: int) -> np.ndarray:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise WrongDims(f"encode wants (H,W,3), got {pixels.shape}")
    if pixels.shape[0] % factor or pixels.shape[1] % factor:
        raise RequestRejected(f"pixel dims {pixels.shape[:2]} not divisible by {factor}")
    r, g, b = pixels[..., 0], pixels[..., 1], pixels[..., 2]
    luma = ((r + g) + b) * THIRD
    chroma_r = (r - g) * HALF
    chroma_b = (b - g) * HALF
    spread = (np.maximum(np.maximum(r, g), b) - np.minimum(np.minimum(r, g), b)) * HALF
    return np.stack([_pool(p, factor) for p in (luma, chroma_r, chroma_b, spread)], axis=-1)


def decode_latent(latent: np.ndarray, factor: int) -> np.ndarray:
    if latent.ndim != 3 or latent.shape[2] != 4:
        raise WrongDims(f"decode wants (h,w,4), got {latent.shape}")
    luma, chroma_r, chroma_b = latent[..., 0], latent[..., 1], latent[..., 2]
    g = luma - (chroma_r + chroma_b) * TWO_THIRDS
    rgb = np.stack([g + chroma_r * F32(2.0), g, g + chroma_b * F32(2.0)], axis=-1)
    rgb = np.clip(rgb, F32(0.0), F32(1.0))
    return np.repeat(np.repeat(rgb, factor, axis=0), factor, axis=1)


# -- 5.7 segment --------------------------------------------------------------


def _intensity(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image.astype(np.float32)
    if image.ndim == 3 and image.shape[2] == 3:
        return ((image[..., 0] + image[..., 1]) + image[..., 2]) * THIRD
    raise WrongDims(f"segment wants (H,W) or (H,W,3), got {image.shape}")


def _bbox_of(mask: np.ndarray) -> list[float]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return [0.0, 0.0, 0.0, 0.0]
    return [float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1)]


def segment_auto(image: np.ndarray) -> list[dict]:
    plane = _intensity(image)
    levels = np.unique(plane)
    if levels.size > AUTO_LEVEL_LIMIT:
        raise RequestRejected(
            f"auto segmentation needs a planted-scene image "
            f"({levels.size} distinct levels > {AUTO_LEVEL_LIMIT})"
        )
    entries = []
    for level in levels:  # ascending; stable sort keeps this order on ties
        mask = plane == level
        entries.append(
            {"mask": mask.astype(np.float32), "area": int(mask.sum()), "bbox": _bbox_of(mask)}
        )
    entries.sort(key=lambda e: -e["area"])
    return entries


def segment_prompt(image: np.ndarray, box, points) -> dict:
    plane = _intensity(image)
    height, width = plane.shape
    x1, y1, x2, y2 = (float(v) for v in box)
    bw, bh = x2 - x1, y2 - y1
    c1 = min(max(int(np.floor(x1 - 0.5 * bw)), 0), width - 1)
    c2 = max(min(int(np.ceil(x2 + 0.5 * bw)), width), c1 + 1)
    r1 = min(max(int(np.floor(y1 - 0.5 * bh)), 0), height - 1)
    r2 = max(min(int(np.ceil(y2 + 0.5 * bh)), height), r1 + 1)
    window = plane[r1:r2, c1:c2]
    threshold = (window.min() + window.max()) * HALF
    binary = plane > threshold
    labels, total = ndimage.label(binary)  # 4-connectivity, raster-scan labels

    chosen: set[int] = set()
    vetoed: set[int] = set()
    any_foreground = False
    for point in points:
        row = min(max(int(np.floor(float(point["y"]))), 0), height - 1)
        col = min(max(int(np.floor(float(point["x"]))), 0), width - 1)
        label = int(labels[row, col])
        if point["polarity"] == "fg":
            any_foreground = True
            if label:
                chosen.add(label)
        elif point["polarity"] == "bg":
            if label:
                vetoed.add(label)
        else:
            raise RequestRejected(f"unknown polarity {point['polarity']!r}")
    if not any_foreground:
        cols = np.arange(width, dtype=np.float64) + 0.5
        rows = np.arange(height, dtype=np.float64) + 0.5
        in_box = ((rows >= y1) & (rows < y2))[:, None] & ((cols >= x1) & (cols < x2))[None, :]
        best, best_count = 0, 0
        for label in range(1, total + 1):
            count = int(((labels == label) & in_box).sum())
            if count > best_count:
                best, best_count = label, count
        if best:
            chosen.add(best)
    chosen -= vetoed

    if chosen:
        mask = np.isin(labels, sorted(chosen))
    else:
        mask = np.zeros((height, width), dtype=bool)
    return {"mask": mask.astype(np.float32), "area": int(mask.sum()), "bbox": _bbox_of(mask)}


# -- manifest -----------------------------------------------------------------


def manifest_payload(downscale: int, timesteps: int) -> dict:
    schedule = {
        "kind": "scaled_linear",
        "beta_start": BETA_START,
        "beta_end": BETA_END,
        "alphas_cumprod": [float(v) for v in alphas_cumprod(timesteps)],
    }
    digest = hashlib.sha256(canonical(schedule)).hexdigest()
    return {
        "backend_id": "scripted-mock",
        "version": "1",
        "protocol": "1",
        "downscale": downscale,
        "timesteps": timesteps,
        "capabilities": {"attention_maps": True, "prompt_segmentation": True},
        "schedule": schedule,
        "schedule_digest": digest,
    }
