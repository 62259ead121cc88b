"""Background occlusion: pick a background occluder, perturb the foreground
target boxes, and alpha-blend the occluder crop over them.

The blend runs on the denoised latent by default (the winning setting); a
pixel-space variant exists as an ablation baseline. Targets are processed
in order and read the already-updated tensor, so overlapping writes are
well-defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import BoxAnnotation, ImageRecord, iou
from .errors import OcclusionSkipped
from .grid import Box
from .grounding import SegmentationResult, candidate_idle_regions
from .noise import ScriptedRng

PERIOD_FINAL = "final"
PERIOD_EVERY_STEP = "every_step"
SPACE_LATENT = "latent"
SPACE_PIXEL = "pixel"

IntBox = tuple[int, int, int, int]


@dataclass(frozen=True)
class OccluderSpec:
    pixel_box: Box
    latent_box: IntBox
    latent_size: tuple[int, int]  # (w, h)


@dataclass(frozen=True)
class OcclusionPlan:
    alpha: float
    targets: tuple[IntBox, ...]  # already perturbed, in the blend space
    period: str = PERIOD_FINAL
    space: str = SPACE_LATENT

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if self.period not in (PERIOD_FINAL, PERIOD_EVERY_STEP):
            raise ValueError(f"unknown period {self.period!r}")
        if self.space not in (SPACE_LATENT, SPACE_PIXEL):
            raise ValueError(f"unknown space {self.space!r}")


def project_box(box: Box, factor: int, width: int, height: int) -> IntBox:
    """Covering integer box: floor the min corner, ceil the max corner."""
    x1 = max(int(math.floor(box[0] / factor)), 0)
    y1 = max(int(math.floor(box[1] / factor)), 0)
    x2 = min(int(math.ceil(box[2] / factor)), width)
    y2 = min(int(math.ceil(box[3] / factor)), height)
    return (x1, y1, x2, y2)


def select_occluder(
    seg: SegmentationResult,
    annotations: Sequence[BoxAnnotation],
    g_add_box: Box | None,
    d: float,
    min_ratio: float,
    image: ImageRecord,
    downscale: int,
    latent_width: int,
    latent_height: int,
    rng: ScriptedRng,
) -> OccluderSpec:
    """Uniform choice among idle-region candidates, re-filtered against the
    added grounding box when one exists (the add-mode variant)."""
    candidates = candidate_idle_regions(seg, annotations, d, min_ratio, image)
    if g_add_box is not None:
        candidates = [box for box in candidates if iou(box, g_add_box) < d]
    if not candidates:
        raise OcclusionSkipped("no occluder candidate")
    pixel_box = rng.choice(candidates)
    latent_box = project_box(pixel_box, downscale, latent_width, latent_height)
    size = (latent_box[2] - latent_box[0], latent_box[3] - latent_box[1])
    if size[0] < 1 or size[1] < 1:
        raise OcclusionSkipped(f"occluder degenerate in latent space: {latent_box}")
    return OccluderSpec(pixel_box=pixel_box, latent_box=latent_box, latent_size=size)


def perturb_region(
    target: IntBox,
    occluder_size: tuple[int, int],
    grid_width: int,
    grid_height: int,
    rng: ScriptedRng,
) -> IntBox | None:
    """Randomly re-seat a target box, occluder-sized, clamped to the grid.

    The min corner is drawn from [max(x1 - w_o, 0), x2) x [max(y1 - h_o, 0), y2)
    so the perturbed box always meets the source box (closed-box sense);
    the max corner clamps to the grid, which may trim the size. Returns
    None for targets that project to zero area.
    """
    x1, y1, x2, y2 = target
    if x2 <= x1 or y2 <= y1:
        return None
    w_o, h_o = occluder_size
    px1 = rng.randint(max(x1 - w_o, 0), x2)
    py1 = rng.randint(max(y1 - h_o, 0), y2)
    px2 = min(px1 + w_o, grid_width)
    py2 = min(py1 + h_o, grid_height)
    return (px1, py1, px2, py2)


def build_plan(
    target_boxes: Sequence[Box],
    occ: OccluderSpec,
    alpha: float,
    period: str,
    space: str,
    rng: ScriptedRng,
    *,
    downscale: int,
    latent_width: int,
    latent_height: int,
    pixel_width: int,
    pixel_height: int,
) -> tuple[OcclusionPlan, list[str]]:
    """Project and perturb the foreground boxes into blend-space targets.

    Exact duplicate boxes (mod mode grounds every annotation, so the two
    families coincide) are occluded once. Degenerate projections are
    skipped and reported as flags.
    """
    flags: list[str] = []
    if space == SPACE_LATENT:
        factor, gw, gh = downscale, latent_width, latent_height
        occ_box, occ_size = occ.latent_box, occ.latent_size
    else:
        factor, gw, gh = 1, pixel_width, pixel_height
        occ_box = project_box(occ.pixel_box, 1, gw, gh)
        occ_size = (occ_box[2] - occ_box[0], occ_box[3] - occ_box[1])

    seen: set[Box] = set()
    targets: list[IntBox] = []
    for i, box in enumerate(target_boxes):
        if box in seen:
            continue
        seen.add(box)
        projected = project_box(box, factor, gw, gh)
        perturbed = perturb_region(projected, occ_size, gw, gh, rng)
        if perturbed is None:
            flags.append(f"occlusion_target_degenerate:{i}")
            continue
        targets.append(perturbed)
    return (
        OcclusionPlan(alpha=alpha, targets=tuple(targets), period=period, space=space),
        flags,
    )


def _blend_regions(
    arr: np.ndarray, targets: Sequence[IntBox], occ_box: IntBox, alpha: float
) -> np.ndarray:
    """Sequential in-place alpha blend of the occluder crop over each target.

    Both crops read the working tensor, and the occluder crop is trimmed
    top-left aligned to the target's (possibly clamped) size. The arithmetic
    is exactly occ * alpha + target * (1 - alpha) in float32.
    """
    out = np.array(arr, dtype=np.float32, copy=True)
    a = np.float32(alpha)
    one_minus = np.float32(1.0) - a
    ox1, oy1, _, _ = occ_box
    for x1, y1, x2, y2 in targets:
        th, tw = y2 - y1, x2 - x1
        if th <= 0 or tw <= 0:
            continue
        occ_crop = out[oy1 : oy1 + th, ox1 : ox1 + tw]
        if occ_crop.shape[:2] != (th, tw):
            raise AssertionError(
                f"occluder crop {occ_crop.shape[:2]} cannot cover target {(th, tw)}"
            )
        out[y1:y2, x1:x2] = occ_crop * a + out[y1:y2, x1:x2] * one_minus
    return out


def recombine(z0: np.ndarray, plan: OcclusionPlan, occ: OccluderSpec) -> np.ndarray:
    """Latent-space occlusion; returns the hidden latent."""
    if plan.space != SPACE_LATENT:
        raise ValueError("recombine expects a latent-space plan")
    return _blend_regions(z0, plan.targets, occ.latent_box, plan.alpha)


def occlude_pixel_space(
    image: np.ndarray, plan: OcclusionPlan, occ: OccluderSpec
) -> np.ndarray:
    """Ablation baseline: the same blend on the decoded image."""
    if plan.space != SPACE_PIXEL:
        raise ValueError("occlude_pixel_space expects a pixel-space plan")
    h, w = image.shape[:2]
    occ_box = project_box(occ.pixel_box, 1, w, h)
    return _blend_regions(image, plan.targets, occ_box, plan.alpha)
