"""Detection datasets: loading, validation, queries, and class-group tables.

The annotation file format is a small canonical JSON document:

    {"images": [{"id", "width", "height", "file_name"}],
     "annotations": [{"image_id", "category", "bbox": [x1, y1, x2, y2]}],
     "categories": ["name", ...]}

A loader shim also accepts COCO-style [x, y, w, h] boxes when the document
carries "bbox_format": "xywh".
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DatasetError
from .grid import Box

log = logging.getLogger(__name__)

# Published area boundaries (pixels squared) for the common X-ray benchmarks.
KNOWN_BOUNDARIES: dict[str, tuple[float, float]] = {
    "pidray": (10000.0, 25000.0),
    "opixray": (10000.0, 15000.0),
    "hixray": (40000.0, 100000.0),
}


@dataclass(frozen=True)
class BoxAnnotation:
    class_name: str
    box: Box
    image_id: str

    def area(self) -> float:
        return (self.box[2] - self.box[0]) * (self.box[3] - self.box[1])


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    pixel_path: str = ""


@dataclass(frozen=True)
class DetectionDataset:
    images: tuple[ImageRecord, ...]
    annotations: tuple[BoxAnnotation, ...]
    class_names: tuple[str, ...]

    def image(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def annotations_for(self, image_id: str) -> list[BoxAnnotation]:
        return [a for a in self.annotations if a.image_id == image_id]


@dataclass(frozen=True)
class ClassGroupTable:
    """Three class groups keyed to half-open area intervals.

    Group 1 covers [0, a_lo), group 2 [a_lo, a_hi), group 3 [a_hi, inf).
    """

    groups: tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]
    boundaries: tuple[float, float]

    def __post_init__(self):
        a_lo, a_hi = self.boundaries
        if not a_lo < a_hi:
            raise ValueError(f"boundaries must increase, got ({a_lo}, {a_hi})")
        seen: set[str] = set()
        for group in self.groups:
            for name in group:
                if name in seen:
                    raise ValueError(f"class {name!r} appears in two groups")
                seen.add(name)

    def group_index_for_area(self, area: float) -> int:
        a_lo, a_hi = self.boundaries
        if area < a_lo:
            return 0
        if area < a_hi:
            return 1
        return 2

    def all_classes(self) -> tuple[str, ...]:
        return tuple(name for group in self.groups for name in group)

    def save(self, path: str | Path) -> None:
        doc = {
            "groups": [list(g) for g in self.groups],
            "boundaries": list(self.boundaries),
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ClassGroupTable":
        doc = json.loads(Path(path).read_text())
        groups = tuple(tuple(g) for g in doc["groups"])
        if len(groups) != 3:
            raise DatasetError(f"group table must have 3 groups, got {len(groups)}")
        return cls(groups=groups, boundaries=tuple(doc["boundaries"]))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two well-formed corner boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _clamp_box(box: Sequence[float], width: int, height: int) -> Box:
    x1, y1, x2, y2 = (float(v) for v in box)
    return (
        min(max(x1, 0.0), float(width)),
        min(max(y1, 0.0), float(height)),
        min(max(x2, 0.0), float(width)),
        min(max(y2, 0.0), float(height)),
    )


def load_dataset(path: str | Path) -> DetectionDataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot parse {path}: {exc}") from exc
    return dataset_from_dict(doc)


def dataset_from_dict(doc: Mapping) -> DetectionDataset:
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DatasetError(f"annotation document missing {key!r}")
    xywh = doc.get("bbox_format") == "xywh"

    images: list[ImageRecord] = []
    by_id: dict[str, ImageRecord] = {}
    for entry in doc["images"]:
        image_id = str(entry["id"])
        if image_id in by_id:
            raise DatasetError(f"duplicate image id {image_id!r}")
        width, height = int(entry["width"]), int(entry["height"])
        if width <= 0 or height <= 0:
            raise DatasetError(f"image {image_id!r} has bad dims {width}x{height}")
        rec = ImageRecord(image_id, width, height, str(entry.get("file_name", "")))
        images.append(rec)
        by_id[image_id] = rec

    categories = tuple(str(name) for name in doc["categories"])
    category_set = set(categories)
    if len(categories) != len(category_set):
        raise DatasetError("duplicate category names")

    annotations: list[BoxAnnotation] = []
    for i, entry in enumerate(doc["annotations"]):
        image_id = str(entry["image_id"])
        if image_id not in by_id:
            raise DatasetError(
                f"annotation #{i} references unknown image id {image_id!r}"
            )
        name = str(entry["category"])
        if name not in category_set:
            raise DatasetError(f"annotation #{i} references unknown class {name!r}")
        raw = entry["bbox"]
        if len(raw) != 4:
            raise DatasetError(f"annotation #{i} bbox must have 4 values")
        if xywh:
            x, y, w, h = (float(v) for v in raw)
            raw = [x, y, x + w, y + h]
        rec = by_id[image_id]
        box = _clamp_box(raw, rec.width, rec.height)
        if not (box[0] < box[2] and box[1] < box[3]):
            raise DatasetError(
                f"annotation #{i} on image {image_id!r} has empty box {list(raw)}"
            )
        if not name:
            raise DatasetError(f"annotation #{i} has empty class name")
        annotations.append(BoxAnnotation(name, box, image_id))

    return DetectionDataset(tuple(images), tuple(annotations), categories)


def dataset_to_dict(ds: DetectionDataset) -> dict:
    return {
        "images": [
            {
                "id": rec.image_id,
                "width": rec.width,
                "height": rec.height,
                "file_name": rec.pixel_path,
            }
            for rec in ds.images
        ],
        "annotations": [
            {
                "image_id": ann.image_id,
                "category": ann.class_name,
                "bbox": list(ann.box),
            }
            for ann in ds.annotations
        ],
        "categories": list(ds.class_names),
    }


def save_dataset(ds: DetectionDataset, path: str | Path) -> None:
    """Canonical serialization: sorted keys, 2-space indent, trailing newline."""
    text = json.dumps(dataset_to_dict(ds), sort_keys=True, indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def mean_area_per_class(ds: DetectionDataset) -> dict[str, float]:
    """Mean box area per class; classes without annotations are dropped."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for ann in ds.annotations:
        sums[ann.class_name] = sums.get(ann.class_name, 0.0) + ann.area()
        counts[ann.class_name] = counts.get(ann.class_name, 0) + 1
    missing = [name for name in ds.class_names if name not in counts]
    if missing:
        log.warning("classes without annotations excluded from grouping: %s", missing)
    return {name: sums[name] / counts[name] for name in sums}


def build_class_groups(
    means: Mapping[str, float], boundaries: tuple[float, float]
) -> ClassGroupTable:
    """Partition classes into three groups by mean area (half-open intervals)."""
    a_lo, a_hi = boundaries
    if not a_lo < a_hi:
        raise ValueError(f"boundaries must increase, got ({a_lo}, {a_hi})")
    groups: tuple[list[str], list[str], list[str]] = ([], [], [])
    # Sorted by name so the grouping is independent of mapping order.
    for name in sorted(means):
        area = means[name]
        if area < a_lo:
            groups[0].append(name)
        elif area < a_hi:
            groups[1].append(name)
        else:
            groups[2].append(name)
    return ClassGroupTable(
        groups=(tuple(groups[0]), tuple(groups[1]), tuple(groups[2])),
        boundaries=(float(a_lo), float(a_hi)),
    )


def filter_small_boxes(
    boxes: Iterable[BoxAnnotation], image: ImageRecord, min_ratio: float
) -> list[BoxAnnotation]:
    """Keep boxes with area >= min_ratio * H * W, preserving order."""
    if not 0 <= min_ratio < 1:
        raise ValueError(f"min_ratio must be in [0, 1), got {min_ratio}")
    threshold = min_ratio * image.width * image.height
    return [ann for ann in boxes if ann.area() >= threshold]
