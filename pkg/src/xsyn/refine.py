"""Attention-guided annotation refinement.

The class-discriminative region of an entity's averaged attention map is
segmented inside its grounding box; median points sampled from that region
(recursive sort-and-divide) plus one minimum-activation background point
prompt the segmenter on the generated image, and the tight box of the
returned mask becomes the refined annotation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import Box, rasterize_box, tight_bbox


class Polarity(str, enum.Enum):
    FOREGROUND = "fg"
    BACKGROUND = "bg"


@dataclass(frozen=True)
class PointPrompt:
    x: float
    y: float
    polarity: Polarity


@dataclass(frozen=True)
class PromptSet:
    points: tuple[PointPrompt, ...]
    box: Box

    def __post_init__(self):
        if sum(p.polarity is Polarity.BACKGROUND for p in self.points) > 1:
            raise ValueError("at most one background point per prompt set")


@dataclass(frozen=True)
class DiscriminativeRegion:
    mask: np.ndarray  # (H, W) bool
    box: Box
    fallback: bool = False


def _sorted_items(region_mask: np.ndarray, attention: np.ndarray):
    """Region pixels as ((row, col), activation), sorted by the total order
    (activation, row, col). The coordinate tie-break makes every split
    deterministic on maps with repeated values."""
    rows, cols = np.nonzero(region_mask)
    items = [
        ((int(r), int(c)), float(attention[r, c])) for r, c in zip(rows, cols)
    ]
    items.sort(key=lambda it: (it[1], it[0][0], it[0][1]))
    return items


def _point(rc: tuple[int, int], polarity: Polarity) -> PointPrompt:
    r, c = rc
    return PointPrompt(x=c + 0.5, y=r + 0.5, polarity=polarity)


def median_point(values: Sequence[tuple[tuple[int, int], float]]) -> tuple[int, int]:
    """Lower-median pixel of (coord, activation) pairs; ties break row-major."""
    if not values:
        raise ValueError("median of empty list")
    items = sorted(values, key=lambda it: (it[1], it[0][0], it[0][1]))
    return items[(len(items) - 1) // 2][0]


def _recurse_medians(items, depth: int, out: list) -> None:
    if depth <= 0 or not items:
        return
    mid = (len(items) - 1) // 2
    out.append(items[mid][0])
    _recurse_medians(items[:mid], depth - 1, out)
    _recurse_medians(items[mid + 1 :], depth - 1, out)


def _background_point(
    region: DiscriminativeRegion, attention: np.ndarray
) -> PointPrompt | None:
    h, w = attention.shape
    box_mask = rasterize_box(region.box, w, h)
    outside = box_mask & ~region.mask.astype(bool)
    items = _sorted_items(outside, attention)
    if not items:
        return None
    return _point(items[0][0], Polarity.BACKGROUND)


def mps_sample(
    region: DiscriminativeRegion, attention: np.ndarray, n: int
) -> list[PointPrompt]:
    """Median point sampling to depth n.

    Yields up to 2^n - 1 foreground points (each recursion level picks the
    lower median, then recurses into the strictly-lower and strictly-higher
    sub-lists) plus one background point at the minimum activation inside
    the box but outside the region. n = 0 means box-only prompting: no
    points at all. Exhausted branches simply emit fewer points; callers can
    compare against 2^n - 1 to detect that.
    """
    if n < 0:
        raise ValueError("division count must be >= 0")
    if n == 0:
        return []
    items = _sorted_items(region.mask, attention)
    coords: list[tuple[int, int]] = []
    _recurse_medians(items, n, coords)
    points = [_point(rc, Polarity.FOREGROUND) for rc in coords]
    background = _background_point(region, attention)
    if background is not None:
        points.append(background)
    return points


def topk_sample(
    region: DiscriminativeRegion, attention: np.ndarray, k: int
) -> list[PointPrompt]:
    """Comparison baseline: the k highest-activation region pixels plus the
    usual background point. Saturates to the whole region when k exceeds it."""
    if k < 1:
        raise ValueError("k must be >= 1")
    items = _sorted_items(region.mask, attention)
    top = items[-k:][::-1] if k < len(items) else items[::-1]
    points = [_point(rc, Polarity.FOREGROUND) for rc, _ in top]
    background = _background_point(region, attention)
    if background is not None:
        points.append(background)
    return points


def discriminative_region(
    attention: np.ndarray, box: Box, segmenter
) -> DiscriminativeRegion:
    """Segment the attention map inside the grounding box.

    Constant maps (the normalizer collapses zero-variance maps to zeros)
    and empty segmentations fall back to the full box interior.
    """
    from .backends.types import SegmentRequest  # local import to avoid a cycle

    h, w = attention.shape
    box_mask = rasterize_box(box, w, h)
    if float(attention.max()) == float(attention.min()):
        return DiscriminativeRegion(box_mask, box, fallback=True)
    result = segmenter.segment(
        SegmentRequest(image=attention.astype(np.float32), mode="prompt", box=box)
    )
    mask = result.masks[0].mask.astype(bool) & box_mask
    if not mask.any():
        return DiscriminativeRegion(box_mask, box, fallback=True)
    return DiscriminativeRegion(mask, box, fallback=False)


def refine_annotation(
    image: np.ndarray, prompt: PromptSet, segmenter
) -> tuple[Box, bool]:
    """Tight box of the segmented item; (grounding box, True) when the
    segmenter returns an empty mask."""
    from .backends.types import SegmentRequest

    result = segmenter.segment(
        SegmentRequest(
            image=image, mode="prompt", box=prompt.box, points=tuple(prompt.points)
        )
    )
    box = tight_bbox(result.masks[0].mask)
    if box is None:
        return prompt.box, True
    return box, False
