"""Grounding-condition construction for the two synthesis variants.

"mod" regenerates every annotated item in place; "add" paints one new item
into an idle background region chosen from a segment-everything pass.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import BoxAnnotation, ClassGroupTable, ImageRecord, iou
from .errors import ConfigError, NoForegroundError, NoIdleRegionError
from .grid import Box, box_area
from .noise import ScriptedRng

PROMPT_JOINER = ", "


class GroundingMode(str, enum.Enum):
    MOD = "mod"
    ADD = "add"


@dataclass(frozen=True)
class GroundingEntity:
    entity_text: str
    box: Box


@dataclass(frozen=True)
class GroundingCondition:
    entities: tuple[GroundingEntity, ...]
    text_prompt: str
    mode: GroundingMode

    def __post_init__(self):
        if self.mode is GroundingMode.ADD and len(self.entities) != 1:
            raise ValueError("add-mode conditions carry exactly one entity")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "text_prompt": self.text_prompt,
            "entities": [
                {"text": e.entity_text, "box": list(e.box)} for e in self.entities
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundingCondition":
        entities = tuple(
            GroundingEntity(e["text"], tuple(float(v) for v in e["box"]))
            for e in doc["entities"]
        )
        return cls(entities, doc["text_prompt"], GroundingMode(doc["mode"]))


@dataclass(frozen=True)
class SegmentMask:
    mask: np.ndarray  # (H, W) float32 {0,1}
    area: int
    bbox: Box


@dataclass(frozen=True)
class SegmentationResult:
    masks: tuple[SegmentMask, ...]


def build_g_mod(annotations: Sequence[BoxAnnotation]) -> GroundingCondition:
    """Mirror the (filtered) annotations; prompt is the class names joined."""
    if not annotations:
        raise NoForegroundError("no annotations remain after filtering")
    entities = tuple(GroundingEntity(a.class_name, a.box) for a in annotations)
    prompt = PROMPT_JOINER.join(a.class_name for a in annotations)
    return GroundingCondition(entities, prompt, GroundingMode.MOD)


def build_g_add(box: Box, class_name: str) -> GroundingCondition:
    entity = GroundingEntity(class_name, box)
    return GroundingCondition((entity,), class_name, GroundingMode.ADD)


def candidate_idle_regions(
    seg: SegmentationResult,
    annotations: Sequence[BoxAnnotation],
    d: float,
    min_ratio: float,
    image: ImageRecord,
) -> list[Box]:
    """Segment boxes that are far (IoU < d) from every annotation.

    The two largest masks by pixel area are discarded first; they are the
    scene background and the whole baggage region. Ties in area break by
    mask index so the result is deterministic.
    """
    if not 0 < d <= 1:
        raise ValueError(f"IoU threshold must be in (0, 1], got {d}")
    if len(seg.masks) < 3:
        return []
    ranked = sorted(range(len(seg.masks)), key=lambda k: (-seg.masks[k].area, k))
    dropped = set(ranked[:2])
    area_floor = min_ratio * image.width * image.height
    candidates = []
    for k, sm in enumerate(seg.masks):
        if k in dropped:
            continue
        if box_area(sm.bbox) < area_floor:
            continue
        if all(iou(sm.bbox, ann.box) < d for ann in annotations):
            candidates.append(sm.bbox)
    return candidates


def select_idle_region(candidates: Sequence[Box], rng: ScriptedRng) -> Box:
    if not candidates:
        raise NoIdleRegionError("no idle region candidate")
    return rng.choice(list(candidates))


def select_category_for_region(
    box: Box, table: ClassGroupTable, rng: ScriptedRng
) -> str:
    """Class drawn from the group whose area interval matches the box.

    An empty matching group falls back to the nearest non-empty group by
    distance from the box area to the group's interval.
    """
    if not any(table.groups):
        raise ConfigError("class group table is empty")
    area = box_area(box)
    idx = table.group_index_for_area(area)
    if not table.groups[idx]:
        idx = _nearest_nonempty_group(table, area)
    return rng.choice(list(table.groups[idx]))


def _nearest_nonempty_group(table: ClassGroupTable, area: float) -> int:
    a_lo, a_hi = table.boundaries
    intervals = ((0.0, a_lo), (a_lo, a_hi), (a_hi, float("inf")))
    best, best_dist = -1, float("inf")
    for i, (lo, hi) in enumerate(intervals):
        if not table.groups[i]:
            continue
        dist = 0.0 if lo <= area < hi else min(abs(area - lo), abs(area - hi))
        if dist < best_dist:
            best, best_dist = i, dist
    return best
