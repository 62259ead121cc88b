"""Backend data contracts shared by the mocks, the remote client, and the engine."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol, runtime_checkable

import numpy as np

from ..errors import ProtocolViolation
from ..grid import Box
from ..grounding import GroundingEntity, SegmentationResult

if TYPE_CHECKING:
    from ..refine import PointPrompt


@dataclass(frozen=True)
class BackendManifest:
    backend_id: str
    version: str
    protocol: str
    downscale: int
    timesteps: int
    alphas_cumprod: tuple[float, ...]
    schedule_kind: str
    beta_start: float
    beta_end: float
    attention_maps: bool
    prompt_segmentation: bool

    def schedule_payload(self) -> dict:
        return {
            "kind": self.schedule_kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "alphas_cumprod": list(self.alphas_cumprod),
        }

    def schedule_digest(self) -> str:
        blob = json.dumps(
            self.schedule_payload(), sort_keys=True, separators=(",", ":")
        ).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def to_payload(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "version": self.version,
            "protocol": self.protocol,
            "downscale": self.downscale,
            "timesteps": self.timesteps,
            "capabilities": {
                "attention_maps": self.attention_maps,
                "prompt_segmentation": self.prompt_segmentation,
            },
            "schedule": self.schedule_payload(),
            "schedule_digest": self.schedule_digest(),
        }

    @classmethod
    def from_payload(cls, doc: dict) -> "BackendManifest":
        try:
            schedule = doc["schedule"]
            manifest = cls(
                backend_id=str(doc["backend_id"]),
                version=str(doc["version"]),
                protocol=str(doc["protocol"]),
                downscale=int(doc["downscale"]),
                timesteps=int(doc["timesteps"]),
                alphas_cumprod=tuple(float(v) for v in schedule["alphas_cumprod"]),
                schedule_kind=str(schedule["kind"]),
                beta_start=float(schedule["beta_start"]),
                beta_end=float(schedule["beta_end"]),
                attention_maps=bool(doc["capabilities"]["attention_maps"]),
                prompt_segmentation=bool(doc["capabilities"]["prompt_segmentation"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolViolation(f"malformed manifest: {exc}") from exc
        if manifest.downscale < 1:
            raise ProtocolViolation("manifest downscale must be >= 1")
        if len(manifest.alphas_cumprod) != manifest.timesteps:
            raise ProtocolViolation("alphas_cumprod length != timesteps")
        if doc.get("schedule_digest") != manifest.schedule_digest():
            raise ProtocolViolation("schedule digest mismatch")
        return manifest


@dataclass(frozen=True)
class DenoiseRequest:
    z: np.ndarray  # (H', W', 2C+1) inpainting input
    step: int
    prompt: str
    entities: tuple[GroundingEntity, ...]
    branch: str  # "cond" | "uncond"


@dataclass(frozen=True)
class DenoiseResponse:
    eps: np.ndarray  # (H', W', C)
    attention: tuple[np.ndarray, ...] = ()  # per entity, (H, W) pixel resolution


@dataclass(frozen=True)
class SegmentRequest:
    image: np.ndarray  # (H, W) or (H, W, 3) float32
    mode: str  # "auto" | "prompt"
    box: Box | None = None
    points: tuple["PointPrompt", ...] = ()


@runtime_checkable
class DenoiserBackend(Protocol):
    def manifest(self) -> BackendManifest: ...

    def denoise(self, request: DenoiseRequest) -> DenoiseResponse: ...


@runtime_checkable
class CodecBackend(Protocol):
    def manifest(self) -> BackendManifest: ...

    def encode(self, pixels: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class SegmenterBackend(Protocol):
    def segment(self, request: SegmentRequest) -> SegmentationResult: ...


@dataclass
class BackendBundle:
    """The three backend roles a pipeline run needs; may be one object."""

    denoiser: DenoiserBackend
    codec: CodecBackend
    segmenter: SegmenterBackend

    @classmethod
    def single(cls, backend) -> "BackendBundle":
        return cls(denoiser=backend, codec=backend, segmenter=backend)
