"""Planted-scene fixtures: deterministic images the oracle segmenter can
recover exactly.

A scene paints each element with a constant quantized gray level (k/64 is
exactly representable in float32), so level-equality segmentation returns
the planted shapes pixel-for-pixel. Corpora generated here drive the
desk-scale pipeline runs and the refinement exactness checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import BoxAnnotation, DetectionDataset, ImageRecord, save_dataset
from .grid import Box, rasterize_box
from .noise import ScriptedRng
from .pngio import save_png

LEVEL_SCALE = 64  # levels are k / 64

# Per-class side ranges (pixels at scale 512); areas spread the classes
# across the three groups under boundaries like (5000, 12000).
CLASS_SIDES: dict[str, tuple[int, int]] = {
    "Lighter": (48, 64),
    "Knife": (80, 100),
    "Gun": (90, 110),
    "Hammer": (120, 140),
}


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" | "ellipse"
    box: Box
    level: int
    class_name: str = ""  # empty: unannotated background clutter


@dataclass
class Scene:
    image_id: str
    width: int
    height: int
    background_level: int
    shapes: list[Shape] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "background_level": self.background_level,
            "shapes": [
                {
                    "kind": s.kind,
                    "box": list(s.box),
                    "level": s.level,
                    "class_name": s.class_name,
                }
                for s in self.shapes
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scene":
        return cls(
            image_id=doc["image_id"],
            width=doc["width"],
            height=doc["height"],
            background_level=doc["background_level"],
            shapes=[
                Shape(s["kind"], tuple(s["box"]), s["level"], s.get("class_name", ""))
                for s in doc["shapes"]
            ],
        )


def shape_mask(shape: Shape, width: int, height: int) -> np.ndarray:
    if shape.kind == "rect":
        return rasterize_box(shape.box, width, height)
    if shape.kind == "ellipse":
        x1, y1, x2, y2 = shape.box
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        rx, ry = (x2 - x1) / 2.0, (y2 - y1) / 2.0
        cols = (np.arange(width, dtype=np.float64) + 0.5 - cx) / rx
        rows = (np.arange(height, dtype=np.float64) + 0.5 - cy) / ry
        return rows[:, None] ** 2 + cols[None, :] ** 2 <= 1.0
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render_scene(scene: Scene) -> np.ndarray:
    """(H, W, 3) float32; later shapes paint over earlier ones."""
    plane = np.full(
        (scene.height, scene.width),
        np.float32(scene.background_level / LEVEL_SCALE),
        dtype=np.float32,
    )
    for shape in scene.shapes:
        mask = shape_mask(shape, scene.width, scene.height)
        plane[mask] = np.float32(shape.level / LEVEL_SCALE)
    return np.stack([plane, plane, plane], axis=-1)


def _random_box(
    rng: ScriptedRng, side_lo: int, side_hi: int, region: tuple[int, int, int, int]
) -> Box:
    rx1, ry1, rx2, ry2 = region
    w = rng.randint(side_lo, side_hi + 1)
    h = rng.randint(side_lo, side_hi + 1)
    x = rng.randint(rx1, max(rx2 - w, rx1) + 1)
    y = rng.randint(ry1, max(ry2 - h, ry1) + 1)
    return (float(x), float(y), float(x + w), float(y + h))


def _separated(box: Box, others: list[Box], gap: float) -> bool:
    for other in others:
        if (
            box[0] < other[2] + gap
            and other[0] < box[2] + gap
            and box[1] < other[3] + gap
            and other[1] < box[3] + gap
        ):
            return False
    return True


def build_scene(image_id: str, size: int, rng: ScriptedRng, n_items: int = 2) -> Scene:
    """Background + baggage + annotated items + idle clutter, no overlaps."""
    margin = size // 10
    baggage: Box = (
        float(margin),
        float(margin),
        float(size - margin),
        float(size - margin),
    )
    scene = Scene(image_id, size, size, background_level=4)
    scene.shapes.append(Shape("rect", baggage, level=8))

    inner = (margin * 2, margin * 2, size - margin * 2, size - margin * 2)
    scale = size / 512.0
    placed: list[Box] = []
    class_names = list(CLASS_SIDES)
    level = 16
    for i in range(n_items):
        name = rng.choice(class_names)
        lo, hi = CLASS_SIDES[name]
        lo, hi = max(int(lo * scale), 4), max(int(hi * scale), 5)
        for _ in range(50):
            box = _random_box(rng, lo, hi, inner)
            if _separated(box, placed, gap=max(6.0 * scale, 2.0)):
                placed.append(box)
                scene.shapes.append(
                    Shape("rect" if i % 2 == 0 else "ellipse", box, level, name)
                )
                level += 4
                break
    # Idle clutter: plausible occluders / add-mode sites, never annotated.
    for _ in range(2):
        lo, hi = max(int(70 * scale), 4), max(int(110 * scale), 5)
        for _ in range(50):
            box = _random_box(rng, lo, hi, inner)
            if _separated(box, placed, gap=max(6.0 * scale, 2.0)):
                placed.append(box)
                scene.shapes.append(Shape("rect", box, level))
                level += 4
                break
    return scene


def write_corpus(
    out_dir: str | Path, n_images: int, size: int = 512, seed: int = 7, n_items: int = 2
) -> DetectionDataset:
    """Render a corpus: images/, annotations.json, scenes.json."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images, annotations, scenes = [], [], []
    for i in range(n_images):
        image_id = f"scene{i:03d}"
        scene = build_scene(image_id, size, ScriptedRng(f"corpus|{seed}|{image_id}"), n_items)
        scenes.append(scene)
        rel = f"images/{image_id}.png"
        save_png(out_dir / rel, render_scene(scene))
        images.append(ImageRecord(image_id, size, size, rel))
        for shape in scene.shapes:
            if shape.class_name:
                annotations.append(BoxAnnotation(shape.class_name, shape.box, image_id))
    ds = DetectionDataset(
        tuple(images), tuple(annotations), tuple(sorted(CLASS_SIDES))
    )
    save_dataset(ds, out_dir / "annotations.json")
    (out_dir / "scenes.json").write_text(
        json.dumps([s.to_dict() for s in scenes], sort_keys=True, indent=2) + "\n"
    )
    return ds
