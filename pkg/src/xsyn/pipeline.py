"""End-to-end synthesis runs: dataset in, synthetic dataset + manifest out.

Per image: filter small boxes, build the grounding condition (mod mirrors
the annotations; add picks an idle region and a size-matched class), encode,
sample with known-region re-injection, refine annotations on the original
result, occlude, decode, and write the hidden image with refined boxes.
Per-image failures are recorded in the manifest and never abort the batch.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import occlusion as occ_mod
from . import tensorio
from .backends.types import BackendBundle, BackendManifest
from .dataset import (
    BoxAnnotation,
    ClassGroupTable,
    DetectionDataset,
    ImageRecord,
    build_class_groups,
    filter_small_boxes,
    mean_area_per_class,
    save_dataset,
)
from .engine import InpaintMask, SamplerConfig, run_sampling
from .errors import (
    ConfigError,
    NoForegroundError,
    NoIdleRegionError,
    OcclusionSkipped,
)
from .grid import Box, boxes_union_mask
from .grounding import (
    GroundingCondition,
    GroundingMode,
    build_g_add,
    build_g_mod,
    candidate_idle_regions,
    select_category_for_region,
    select_idle_region,
)
from .noise import derive_rng
from .pngio import load_png, save_png
from .refine import (
    PromptSet,
    discriminative_region,
    mps_sample,
    refine_annotation,
    topk_sample,
)

log = logging.getLogger(__name__)

ATTENTION_RENDER = "pixel"  # attention maps are refined at pixel resolution


@dataclass
class PipelineConfig:
    out_dir: str
    mode: str = "mod"
    alpha: float = 0.3
    divisions: int = 4
    iou_threshold: float = 0.2
    min_box_ratio: float = 0.001
    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0
    backend: str = "mock"
    endpoint: str | None = None
    bom_period: str = occ_mod.PERIOD_FINAL
    bom_space: str = occ_mod.SPACE_LATENT
    point_strategy: str = "mps"
    topk: int = 15
    groups_path: str | None = None
    boundaries: tuple[float, float] | None = None
    workers: int = 1
    debug_tensors: bool = False
    mock_downscale: int = 8
    mock_timesteps: int = 1000

    def __post_init__(self):
        if self.mode not in ("mod", "add"):
            raise ConfigError(f"mode must be 'mod' or 'add', got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0,1], got {self.alpha}")
        if self.divisions < 0:
            raise ConfigError("divisions must be >= 0")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError("iou threshold must be in (0,1]")
        if not 0.0 <= self.min_box_ratio < 1.0:
            raise ConfigError("min box ratio must be in [0,1)")
        if self.point_strategy not in ("mps", "topk"):
            raise ConfigError(f"unknown point strategy {self.point_strategy!r}")
        if self.backend not in ("mock", "remote"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "remote" and not self.endpoint:
            raise ConfigError("remote backend requires an endpoint")
        if self.bom_period == occ_mod.PERIOD_EVERY_STEP and self.bom_space != occ_mod.SPACE_LATENT:
            raise ConfigError("every-step occlusion runs in latent space only")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["attention_render"] = ATTENTION_RENDER
        if self.boundaries is not None:
            doc["boundaries"] = list(self.boundaries)
        return doc

    # Fields that say where or how a run executed, not what it produced.
    _NON_CONTENT_FIELDS = (
        "out_dir",
        "backend",
        "endpoint",
        "workers",
        "debug_tensors",
        "mock_downscale",
        "mock_timesteps",
    )

    def content_dict(self) -> dict:
        """Parameters that determine output bytes; the backend identity is
        captured separately from its manifest."""
        doc = self.to_dict()
        for field_name in self._NON_CONTENT_FIELDS:
            doc.pop(field_name)
        return doc


@dataclass
class ImageOutcome:
    image_id: str
    status: str  # "generated" | "skipped"
    reason: str = ""
    flags: list[str] = field(default_factory=list)
    annotation_count: int = 0

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "status": self.status,
            "reason": self.reason,
            "flags": self.flags,
            "annotation_count": self.annotation_count,
        }


@dataclass
class RunManifest:
    config: dict
    backend: dict
    entries: list[dict]
    outputs: dict
    content_digest: str
    stats: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "backend": self.backend,
            "entries": self.entries,
            "outputs": self.outputs,
            "content_digest": self.content_digest,
            "stats": self.stats,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
        )


def make_backends(cfg: PipelineConfig) -> BackendBundle:
    if cfg.backend == "mock":
        from .backends.mock import ScriptedMockBackend

        return BackendBundle.single(
            ScriptedMockBackend(cfg.mock_downscale, cfg.mock_timesteps)
        )
    from .backends.remote import RemoteBackend

    return BackendBundle.single(RemoteBackend(cfg.endpoint))


def load_group_table(cfg: PipelineConfig, ds: DetectionDataset) -> ClassGroupTable | None:
    if cfg.mode != "add":
        return None
    if cfg.groups_path:
        return ClassGroupTable.load(cfg.groups_path)
    if cfg.boundaries:
        return build_class_groups(mean_area_per_class(ds), cfg.boundaries)
    raise ConfigError("add mode needs --groups or --boundaries")


@dataclass
class _ImageResult:
    outcome: ImageOutcome
    hidden_image: np.ndarray | None = None
    annotations: list[BoxAnnotation] = field(default_factory=list)
    debug: dict[str, np.ndarray] = field(default_factory=dict)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _refine_entities(
    cond: GroundingCondition,
    records,
    original_image: np.ndarray,
    cfg: PipelineConfig,
    segmenter,
    flags: list[str],
) -> list[BoxAnnotation]:
    refined = []
    for record in records:
        region = discriminative_region(record.map, record.box, segmenter)
        if region.fallback:
            flags.append(f"region_fallback:{record.entity_index}")
        if cfg.point_strategy == "mps":
            points = mps_sample(region, record.map, cfg.divisions)
            expected = 2**cfg.divisions - 1
            foreground = sum(1 for p in points if p.polarity.value == "fg")
            if cfg.divisions > 0 and foreground < expected:
                flags.append(f"mps_exhausted:{record.entity_index}")
        else:
            points = topk_sample(region, record.map, cfg.topk)
        prompt = PromptSet(tuple(points), record.box)
        box, fell_back = refine_annotation(original_image, prompt, segmenter)
        if fell_back:
            flags.append(f"refine_fallback:{record.entity_index}")
        refined.append((record.entity_text, box))
    return refined


def _process_image(
    record: ImageRecord,
    annotations: list[BoxAnnotation],
    pixels: np.ndarray,
    cfg: PipelineConfig,
    backends: BackendBundle,
    manifest: BackendManifest,
    table: ClassGroupTable | None,
) -> _ImageResult:
    outcome = ImageOutcome(record.image_id, "skipped")
    flags = outcome.flags
    try:
        kept = filter_small_boxes(annotations, record, cfg.min_box_ratio)
        g_add_box: Box | None = None
        if cfg.mode == "mod":
            cond = build_g_mod(kept)  # raises NoForeground before backend work

        # Segment-everything on the input image: idle-region search for add
        # mode, occluder search for both modes.
        from .backends.types import SegmentRequest

        seg = backends.segmenter.segment(SegmentRequest(pixels, "auto"))

        if cfg.mode == "add":
            candidates = candidate_idle_regions(
                seg, kept, cfg.iou_threshold, cfg.min_box_ratio, record
            )
            idle_rng = derive_rng(cfg.seed, record.image_id, "idle")
            g_add_box = select_idle_region(candidates, idle_rng)
            category_rng = derive_rng(cfg.seed, record.image_id, "category")
            class_name = select_category_for_region(g_add_box, table, category_rng)
            cond = build_g_add(g_add_box, class_name)

        z0_input = backends.codec.encode(pixels)
        lat_h, lat_w = z0_input.shape[:2]
        keep = np.float32(1.0) - boxes_union_mask(
            [e.box for e in cond.entities], record.width, record.height
        )
        mask = InpaintMask.from_pixel_mask(keep, manifest.downscale)

        plan = None
        occluder = None
        try:
            occ_rng = derive_rng(cfg.seed, record.image_id, "occluder")
            occluder = occ_mod.select_occluder(
                seg,
                kept,
                g_add_box,
                cfg.iou_threshold,
                cfg.min_box_ratio,
                record,
                manifest.downscale,
                lat_w,
                lat_h,
                occ_rng,
            )
            target_boxes = [e.box for e in cond.entities] + [a.box for a in kept]
            plan, plan_flags = occ_mod.build_plan(
                target_boxes,
                occluder,
                cfg.alpha,
                cfg.bom_period,
                cfg.bom_space,
                derive_rng(cfg.seed, record.image_id, "perturb"),
                downscale=manifest.downscale,
                latent_width=lat_w,
                latent_height=lat_h,
                pixel_width=record.width,
                pixel_height=record.height,
            )
            flags.extend(plan_flags)
        except OcclusionSkipped as exc:
            flags.append("occlusion_skipped")
            log.debug("occlusion skipped for %s: %s", record.image_id, exc)

        step_callback = None
        if plan is not None and plan.period == occ_mod.PERIOD_EVERY_STEP:
            def step_callback(trace, _plan=plan, _occ=occluder):
                return occ_mod.recombine(trace.z_after_update, _plan, _occ)

        sampler_cfg = SamplerConfig(
            steps=cfg.steps,
            guidance_scale=cfg.guidance_scale,
            seed=cfg.seed,
            noise_tag=record.image_id,
        )
        z0, records = run_sampling(
            z0_input, mask, cond, sampler_cfg, backends.denoiser, step_callback
        )

        original_image = backends.codec.decode(z0)
        refined = _refine_entities(
            cond, records, original_image, cfg, backends.segmenter, flags
        )

        if plan is None:
            hidden_latent = z0
            hidden_image = original_image
        elif plan.space == occ_mod.SPACE_PIXEL:
            hidden_latent = z0
            hidden_image = occ_mod.occlude_pixel_space(original_image, plan, occluder)
        elif plan.period == occ_mod.PERIOD_EVERY_STEP:
            hidden_latent = z0  # occluded during sampling
            hidden_image = original_image
        else:
            hidden_latent = occ_mod.recombine(z0, plan, occluder)
            hidden_image = backends.codec.decode(hidden_latent)

        out_annotations = []
        if cfg.mode == "mod":
            for name, box in refined:
                out_annotations.append(BoxAnnotation(name, box, record.image_id))
        else:
            out_annotations.extend(kept)
            name, box = refined[0]
            out_annotations.append(BoxAnnotation(name, box, record.image_id))

        debug: dict[str, np.ndarray] = {}
        if cfg.debug_tensors:
            debug["z0"] = z0
            debug["z0_hidden"] = hidden_latent
            for rec_ in records:
                debug[f"attn{rec_.entity_index}"] = rec_.map

        outcome.status = "generated"
        outcome.annotation_count = len(out_annotations)
        return _ImageResult(outcome, hidden_image, out_annotations, debug)
    except (NoForegroundError, NoIdleRegionError) as exc:
        outcome.reason = type(exc).__name__
        return _ImageResult(outcome)
    except Exception as exc:
        # Per-image failures never abort the batch; they land in the manifest.
        log.exception("image %s failed", record.image_id)
        outcome.reason = f"{type(exc).__name__}: {exc}"
        flags.append("error")
        return _ImageResult(outcome)


def run_xsyn(
    ds: DetectionDataset,
    cfg: PipelineConfig,
    backends: BackendBundle,
    dataset_root: str | Path = ".",
) -> tuple[DetectionDataset, RunManifest]:
    started = time.monotonic()
    out_dir = Path(cfg.out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if cfg.debug_tensors:
        (out_dir / "debug").mkdir(exist_ok=True)

    manifest = backends.denoiser.manifest()
    table = load_group_table(cfg, ds)
    if table is not None:
        unknown = set(table.all_classes()) - set(ds.class_names)
        if unknown:
            raise ConfigError(f"group table classes not in dataset: {sorted(unknown)}")

    dataset_root = Path(dataset_root)

    def work(record: ImageRecord) -> _ImageResult:
        try:
            pixels = load_png(dataset_root / record.pixel_path)
            if pixels.shape[:2] != (record.height, record.width):
                raise ConfigError(
                    f"image {record.image_id} is {pixels.shape[:2]}, "
                    f"annotations say {(record.height, record.width)}"
                )
        except Exception as exc:
            log.exception("cannot load image %s", record.image_id)
            return _ImageResult(
                ImageOutcome(
                    record.image_id,
                    "skipped",
                    reason=f"{type(exc).__name__}: {exc}",
                    flags=["error"],
                )
            )
        return _process_image(
            record,
            ds.annotations_for(record.image_id),
            pixels,
            cfg,
            backends,
            manifest,
            table,
        )

    if cfg.workers == 1:
        results = [work(rec) for rec in ds.images]
    else:
        with concurrent.futures.ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(work, ds.images))

    out_images: list[ImageRecord] = []
    out_annotations: list[BoxAnnotation] = []
    entries: list[dict] = []
    image_shas: dict[str, str] = {}
    for record, result in zip(ds.images, results):
        if result.outcome.status == "generated":
            rel = f"images/{record.image_id}.png"
            save_png(out_dir / rel, result.hidden_image)
            image_shas[record.image_id] = _sha256_file(out_dir / rel)
            out_images.append(
                ImageRecord(record.image_id, record.width, record.height, rel)
            )
            out_annotations.extend(result.annotations)
            for name, arr in result.debug.items():
                tensorio.write(out_dir / "debug" / f"{record.image_id}.{name}.xten", arr)
        entries.append(result.outcome.to_dict())

    out_ds = DetectionDataset(
        tuple(out_images), tuple(out_annotations), ds.class_names
    )
    save_dataset(out_ds, out_dir / "annotations.json")

    outputs = {
        "annotations_sha256": _sha256_file(out_dir / "annotations.json"),
        "images": image_shas,
    }
    backend_info = {
        "backend_id": manifest.backend_id,
        "schedule_digest": manifest.schedule_digest(),
        "downscale": manifest.downscale,
        "timesteps": manifest.timesteps,
    }
    body = {
        "config": cfg.content_dict(),
        "backend": backend_info,
        "entries": entries,
        "outputs": outputs,
    }
    content_digest = hashlib.sha256(
        json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()
    run_manifest = RunManifest(
        config=cfg.to_dict(),
        backend=backend_info,
        entries=entries,
        outputs=outputs,
        content_digest=content_digest,
        stats={
            "wall_seconds": round(time.monotonic() - started, 3),
            "generated": len(out_images),
            "skipped": len(ds.images) - len(out_images),
        },
    )
    run_manifest.save(out_dir / "manifest.json")
    return out_ds, run_manifest
