"""Inpainting sampling loop over abstract latents.

The engine owns composition only: expanding the denoiser input with the
masked clean latent, re-injecting the schedule-noised known region before
every denoising step, classifier-free guidance mixing, the deterministic
(eta = 0) update driven by schedule constants from the backend manifest,
and attention-map accumulation. Model internals live behind the backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backends.types import DenoiseRequest, DenoiserBackend
from .errors import BackendError, ConfigError, NumericalError, ProtocolViolation
from .grid import Box, average_pool
from .grounding import GroundingCondition
from .noise import noise_field


@dataclass(frozen=True)
class InpaintMask:
    """Keep-mask: 1 preserves the source content, 0 marks pixels to repaint."""

    pixel_mask: np.ndarray  # (H, W) float32 {0,1}
    latent_mask: np.ndarray  # (H/f, W/f) float32 [0,1]

    @classmethod
    def from_pixel_mask(cls, pixel_mask: np.ndarray, downscale: int) -> "InpaintMask":
        pixel_mask = np.asarray(pixel_mask, dtype=np.float32)
        return cls(pixel_mask, average_pool(pixel_mask, downscale))


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    total_timesteps: int | None = None  # None: take the backend manifest's
    seed: int = 0
    latent_dims: tuple[int, int, int] | None = None
    noise_tag: str = ""  # usually the image id; isolates per-image noise

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")


@dataclass
class AttentionRecord:
    """Finalized per-entity attention: mean over steps, min-max normalized.

    Zero-variance means normalize to all zeros so downstream refinement can
    take its box fallback instead of dividing by zero.
    """

    entity_index: int
    entity_text: str
    box: Box
    map: np.ndarray  # (H, W) float32 in [0,1]
    samples: int


def make_inpaint_input(
    z_t: np.ndarray, z0_input: np.ndarray, mask: InpaintMask
) -> np.ndarray:
    """Concat(z_t, z0_input * mask, mask) along channels -> depth 2C+1."""
    if z_t.shape != z0_input.shape:
        raise ValueError(f"latent dims differ: {z_t.shape} vs {z0_input.shape}")
    m = mask.latent_mask
    if m.shape != z_t.shape[:2]:
        raise ValueError(f"mask dims {m.shape} do not match latent {z_t.shape[:2]}")
    masked = z0_input * m[..., None]
    return np.concatenate([z_t, masked, m[..., None]], axis=-1)


def blend_known_region(
    z_prev: np.ndarray, z_t_input: np.ndarray, mask: InpaintMask
) -> np.ndarray:
    """z_prev outside the keep region, z_t_input inside (channel broadcast)."""
    if z_prev.shape != z_t_input.shape:
        raise ValueError(f"latent dims differ: {z_prev.shape} vs {z_t_input.shape}")
    m = mask.latent_mask
    if m.shape != z_prev.shape[:2]:
        raise ValueError(f"mask dims {m.shape} do not match latent {z_prev.shape[:2]}")
    m = m[..., None]
    return z_prev * (np.float32(1.0) - m) + z_t_input * m


def sampling_timesteps(total_timesteps: int, steps: int) -> list[int]:
    """Evenly strided timesteps, descending: [stride*(steps-1), ..., stride, 0]."""
    if steps > total_timesteps:
        raise ConfigError(f"steps {steps} exceeds schedule length {total_timesteps}")
    stride = total_timesteps // steps
    return [i * stride for i in range(steps - 1, -1, -1)]


@dataclass(frozen=True)
class StepTrace:
    """Per-step snapshot handed to the sampling callback."""

    index: int
    step: int
    z_t_input: np.ndarray
    z_before_blend: np.ndarray
    z_after_blend: np.ndarray
    z_after_update: np.ndarray
    is_last: bool


StepCallback = Callable[[StepTrace], "np.ndarray | None"]


def _noised_input(
    z0_input: np.ndarray, abar_t: float, seed: int, tag: str, step: int
) -> np.ndarray:
    eps = noise_field(f"step-noise|{seed}|{tag}|{step}", z0_input.shape)
    return np.float32(math.sqrt(abar_t)) * z0_input + np.float32(
        math.sqrt(1.0 - abar_t)
    ) * eps


def run_sampling(
    z0_input: np.ndarray,
    mask: InpaintMask,
    cond: GroundingCondition,
    cfg: SamplerConfig,
    backend: DenoiserBackend,
    step_callback: StepCallback | None = None,
) -> tuple[np.ndarray, list[AttentionRecord]]:
    """Sample the inpainted latent; return z_0 and finalized attention.

    Runs timesteps descending. Each step re-injects the schedule-noised
    input over the keep region, calls the backend for the unconditional and
    conditional branches, mixes with the guidance scale, and applies the
    deterministic update. After the final update the keep region is restored
    from the clean input latent. A callback may observe every step and
    substitute the working latent (the every-step occlusion hook).
    """
    z0_input = np.ascontiguousarray(z0_input, dtype=np.float32)
    if z0_input.ndim != 3:
        raise ValueError(f"latent must be (h, w, c), got {z0_input.shape}")
    if cfg.latent_dims is not None and tuple(z0_input.shape) != tuple(cfg.latent_dims):
        raise ConfigError(
            f"latent dims {z0_input.shape} != configured {cfg.latent_dims}"
        )
    if not cond.entities:
        raise ValueError("grounding condition has no entities")

    manifest = backend.manifest()
    if cfg.total_timesteps is not None and cfg.total_timesteps != manifest.timesteps:
        raise ConfigError(
            f"configured timesteps {cfg.total_timesteps} != backend {manifest.timesteps}"
        )
    abar = manifest.alphas_cumprod
    timesteps = sampling_timesteps(manifest.timesteps, cfg.steps)
    height, width = (
        z0_input.shape[0] * manifest.downscale,
        z0_input.shape[1] * manifest.downscale,
    )

    attn_sums = [np.zeros((height, width), dtype=np.float64) for _ in cond.entities]
    attn_counts = [0 for _ in cond.entities]
    guidance = np.float32(cfg.guidance_scale)

    z = noise_field(f"init|{cfg.seed}|{cfg.noise_tag}", z0_input.shape)
    for index, t in enumerate(timesteps):
        abar_t = abar[t]
        z_t_input = _noised_input(z0_input, abar_t, cfg.seed, cfg.noise_tag, t)
        z_before = z
        z = blend_known_region(z, z_t_input, mask)
        z_after_blend = z

        x_in = make_inpaint_input(z, z0_input, mask)
        try:
            uncond = backend.denoise(DenoiseRequest(x_in, t, "", (), "uncond"))
            conditional = backend.denoise(
                DenoiseRequest(x_in, t, cond.text_prompt, cond.entities, "cond")
            )
        except BackendError as exc:
            raise BackendError(f"denoise failed at step index {index} (t={t}): {exc}") from exc
        eps = uncond.eps + guidance * (conditional.eps - uncond.eps)

        sqrt_a = np.float32(math.sqrt(abar_t))
        sqrt_b = np.float32(math.sqrt(1.0 - abar_t))
        pred_x0 = (z - sqrt_b * eps) / sqrt_a
        abar_prev = abar[timesteps[index + 1]] if index + 1 < len(timesteps) else 1.0
        z = np.float32(math.sqrt(abar_prev)) * pred_x0 + np.float32(
            math.sqrt(1.0 - abar_prev)
        ) * eps
        is_last = index + 1 == len(timesteps)
        if is_last:
            # Eq-style re-injection at noise level zero: the keep region of
            # the final latent is exactly the clean input.
            z = blend_known_region(z, z0_input, mask)
        if not np.isfinite(z).all():
            raise NumericalError(
                f"non-finite latent after step index {index} (t={t})", step_index=index
            )

        if manifest.attention_maps:
            if len(conditional.attention) != len(cond.entities):
                raise ProtocolViolation(
                    f"expected {len(cond.entities)} attention maps, "
                    f"got {len(conditional.attention)}"
                )
            for i, amap in enumerate(conditional.attention):
                if amap.shape != (height, width):
                    raise ProtocolViolation(
                        f"attention map dims {amap.shape} != pixel dims {(height, width)}"
                    )
                attn_sums[i] += amap
                attn_counts[i] += 1

        if step_callback is not None:
            replacement = step_callback(
                StepTrace(index, t, z_t_input, z_before, z_after_blend, z, is_last)
            )
            if replacement is not None:
                z = np.asarray(replacement, dtype=np.float32)

    records = [
        AttentionRecord(
            entity_index=i,
            entity_text=entity.entity_text,
            box=entity.box,
            map=_finalize_map(attn_sums[i], attn_counts[i]),
            samples=attn_counts[i],
        )
        for i, entity in enumerate(cond.entities)
    ]
    return z, records


def _finalize_map(total: np.ndarray, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(total.shape, dtype=np.float32)
    mean = (total / count).astype(np.float32)
    lo, hi = float(mean.min()), float(mean.max())
    if hi == lo:
        return np.zeros(mean.shape, dtype=np.float32)
    return (mean - np.float32(lo)) / np.float32(hi - lo)
