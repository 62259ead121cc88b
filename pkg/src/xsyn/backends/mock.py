"""Deterministic in-process backends for desk-scale verification.

Every response is a pure function of the canonical request payload, so a
remote service implementing the same scripted generators (PROTOCOL.md,
"Scripted mock semantics") produces byte-identical responses. Keep this
module and that document in lockstep.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import BackendError
from ..grid import Box, average_pool, tight_bbox, upsample_nearest
from ..grounding import SegmentationResult, SegmentMask
from ..noise import noise_field
from ..refine import Polarity
from . import wire
from .types import (
    BackendManifest,
    DenoiseRequest,
    DenoiseResponse,
    SegmentRequest,
)

LATENT_CHANNELS = 4
BETA_START = 0.00085
BETA_END = 0.012
MAX_AUTO_LEVELS = 64

_F32_HALF = np.float32(0.5)
_F32_THIRD = np.float32(1.0 / 3.0)
_F32_TWO_THIRDS = np.float32(2.0 / 3.0)
_F32_TWO = np.float32(2.0)


def schedule_alphas(timesteps: int, beta_start: float = BETA_START, beta_end: float = BETA_END) -> np.ndarray:
    """Scaled-linear beta schedule; cumulative product of (1 - beta), float64."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if timesteps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        t = np.arange(timesteps, dtype=np.float64) / float(timesteps - 1)
        sqrt_betas = np.sqrt(beta_start) + t * (np.sqrt(beta_end) - np.sqrt(beta_start))
        betas = sqrt_betas * sqrt_betas
    return np.cumprod(1.0 - betas)


def scripted_eps(digest: str, dims: tuple[int, int, int]) -> np.ndarray:
    return noise_field(f"eps|{digest}", dims)


def attention_weight(step: int) -> float:
    """Step-dependent scalar in [0.5, 1), pure integer arithmetic."""
    return 0.5 + 0.5 * ((step * 2654435761) % 4096) / 4096.0


def attention_bump(box: Box, height: int, width: int) -> np.ndarray:
    """Pyramid peaking at the box center, zero outside the box (float64)."""
    x1, y1, x2, y2 = (float(v) for v in box)
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    rx, ry = (x2 - x1) / 2.0, (y2 - y1) / 2.0
    cols = (np.arange(width, dtype=np.float64) + 0.5 - cx) / rx
    rows = (np.arange(height, dtype=np.float64) + 0.5 - cy) / ry
    cheb = np.maximum(np.abs(rows)[:, None], np.abs(cols)[None, :])
    return np.maximum(0.0, 1.0 - cheb)


def intensity_plane(image: np.ndarray) -> np.ndarray:
    """(H, W) float32 intensity: the image itself or the mean of RGB."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return ((image[..., 0] + image[..., 1]) + image[..., 2]) * _F32_THIRD
    raise BackendError(f"segmenter expects (H,W) or (H,W,3), got {image.shape}")


def auto_masks(image: np.ndarray) -> list[SegmentMask]:
    """One mask per distinct intensity level, sorted by area descending.

    Planted-scene fixtures paint every element with its own constant level,
    so the levels recover the planted shapes exactly. Anything with more
    distinct levels than a plausible scene is rejected.
    """
    plane = intensity_plane(image)
    levels = np.unique(plane)
    if levels.size > MAX_AUTO_LEVELS:
        raise BackendError(
            f"auto segmentation needs a planted-scene image "
            f"({levels.size} distinct levels > {MAX_AUTO_LEVELS})"
        )
    masks = []
    for value in levels:  # ascending level order
        mask = plane == value
        bbox = tight_bbox(mask)
        masks.append(
            SegmentMask(mask.astype(np.float32), int(mask.sum()), bbox)
        )
    # Stable sort: equal areas keep ascending level order.
    masks.sort(key=lambda m: -m.area)
    return masks


def _point_pixel(x: float, y: float, height: int, width: int) -> tuple[int, int]:
    r = min(max(int(np.floor(y)), 0), height - 1)
    c = min(max(int(np.floor(x)), 0), width - 1)
    return r, c


def prompt_mask(image: np.ndarray, box: Box, points=()) -> SegmentMask:
    """Threshold near the box, label components, honor point polarity.

    The threshold is the midpoint of min and max intensity inside the box
    expanded by half its size each way; components are 4-connected over the
    whole image so spills outside the box are still recovered whole.
    """
    plane = intensity_plane(image)
    height, width = plane.shape
    x1, y1, x2, y2 = (float(v) for v in box)
    w, h = x2 - x1, y2 - y1
    c1 = min(max(int(np.floor(x1 - 0.5 * w)), 0), width - 1)
    c2 = max(min(int(np.ceil(x2 + 0.5 * w)), width), c1 + 1)
    r1 = min(max(int(np.floor(y1 - 0.5 * h)), 0), height - 1)
    r2 = max(min(int(np.ceil(y2 + 0.5 * h)), height), r1 + 1)
    roi = plane[r1:r2, c1:c2]
    threshold = (roi.min() + roi.max()) * _F32_HALF
    binary = plane > threshold
    labels, count = ndimage.label(binary)

    selected: set[int] = set()
    excluded: set[int] = set()
    has_foreground = False
    for p in points:
        r, c = _point_pixel(p.x, p.y, height, width)
        label = int(labels[r, c])
        if p.polarity is Polarity.FOREGROUND:
            has_foreground = True
            if label:
                selected.add(label)
        else:
            if label:
                excluded.add(label)
    if not has_foreground:
        # Box-only prompting: the component overlapping the box the most,
        # ties broken by first-seen (smallest) label.
        from ..grid import rasterize_box

        box_mask = rasterize_box(box, width, height)
        best_label, best_overlap = 0, 0
        for label in range(1, count + 1):
            overlap = int(((labels == label) & box_mask).sum())
            if overlap > best_overlap:
                best_label, best_overlap = label, overlap
        if best_label:
            selected.add(best_label)
    selected -= excluded

    if selected:
        mask = np.isin(labels, sorted(selected))
    else:
        mask = np.zeros((height, width), dtype=bool)
    bbox = tight_bbox(mask) or (0.0, 0.0, 0.0, 0.0)
    return SegmentMask(mask.astype(np.float32), int(mask.sum()), bbox)


def mock_encode(pixels: np.ndarray, downscale: int) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise BackendError(f"encode expects (H,W,3), got {pixels.shape}")
    height, width = pixels.shape[:2]
    if height % downscale or width % downscale:
        raise BackendError(f"pixel dims {height}x{width} not divisible by {downscale}")
    r, g, b = pixels[..., 0], pixels[..., 1], pixels[..., 2]
    planes = (
        ((r + g) + b) * _F32_THIRD,
        (r - g) * _F32_HALF,
        (b - g) * _F32_HALF,
        (np.maximum(np.maximum(r, g), b) - np.minimum(np.minimum(r, g), b)) * _F32_HALF,
    )
    return np.stack([average_pool(p, downscale) for p in planes], axis=-1)


def mock_decode(latent: np.ndarray, downscale: int) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float32)
    if latent.ndim != 3 or latent.shape[2] != LATENT_CHANNELS:
        raise BackendError(f"decode expects (h,w,{LATENT_CHANNELS}), got {latent.shape}")
    y, cr, cb = latent[..., 0], latent[..., 1], latent[..., 2]
    g = y - (cr + cb) * _F32_TWO_THIRDS
    rgb = np.stack([g + cr * _F32_TWO, g, g + cb * _F32_TWO], axis=-1)
    rgb = np.clip(rgb, np.float32(0.0), np.float32(1.0))
    return upsample_nearest(rgb, downscale)


class ScriptedMockBackend:
    """All five backend roles, scripted. Stateless apart from a bump cache."""

    def __init__(self, downscale: int = 8, timesteps: int = 1000):
        self._manifest = BackendManifest(
            backend_id="scripted-mock",
            version="1",
            protocol=wire.PROTOCOL_VERSION,
            downscale=downscale,
            timesteps=timesteps,
            alphas_cumprod=tuple(float(v) for v in schedule_alphas(timesteps)),
            schedule_kind="scaled_linear",
            beta_start=BETA_START,
            beta_end=BETA_END,
            attention_maps=True,
            prompt_segmentation=True,
        )
        self._bump_cache: dict[tuple, np.ndarray] = {}

    def manifest(self) -> BackendManifest:
        return self._manifest

    def denoise(self, request: DenoiseRequest) -> DenoiseResponse:
        z = np.asarray(request.z, dtype=np.float32)
        if z.ndim != 3 or z.shape[2] < 3 or z.shape[2] % 2 == 0:
            raise BackendError(f"denoise expects (h,w,2C+1) input, got {z.shape}")
        if not 0 <= request.step < self._manifest.timesteps:
            raise BackendError(f"step {request.step} outside schedule")
        if request.branch not in ("cond", "uncond"):
            raise BackendError(f"unknown guidance branch {request.branch!r}")
        h, w, channels = z.shape
        c = (channels - 1) // 2
        payload = wire.denoise_payload(
            z, request.step, request.prompt, request.entities, request.branch
        )
        digest = wire.request_digest(wire.OP_DENOISE, payload)
        eps = scripted_eps(digest, (h, w, c))
        attention: list[np.ndarray] = []
        if request.branch == "cond":
            scale = self._manifest.downscale
            weight = attention_weight(request.step)
            for entity in request.entities:
                key = (entity.box, h * scale, w * scale)
                bump = self._bump_cache.get(key)
                if bump is None:
                    bump = attention_bump(entity.box, h * scale, w * scale)
                    self._bump_cache[key] = bump
                attention.append((bump * weight).astype(np.float32))
        return DenoiseResponse(eps=eps, attention=tuple(attention))

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        return mock_encode(pixels, self._manifest.downscale)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return mock_decode(latent, self._manifest.downscale)

    def segment(self, request: SegmentRequest) -> SegmentationResult:
        if request.mode == "auto":
            return SegmentationResult(tuple(auto_masks(request.image)))
        if request.mode == "prompt":
            if request.box is None:
                raise BackendError("prompt segmentation requires a box")
            mask = prompt_mask(request.image, request.box, request.points)
            return SegmentationResult((mask,))
        raise BackendError(f"unknown segmentation mode {request.mode!r}")
