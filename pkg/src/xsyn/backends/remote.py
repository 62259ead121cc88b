"""Wire protocol v1 client.

One connection per request keeps the client trivially safe for concurrent
use; a semaphore bounds in-flight requests. Idempotent requests (all of
them: backends are pure) retry on transport failures with backoff. Every
response tensor is validated against the operation's dimension contract
before it reaches the caller.
"""

from __future__ import annotations

import itertools
import socket
import threading
import time
import uuid
from typing import Mapping

import numpy as np

from ..errors import (
    BackendError,
    DimsMismatch,
    ProtocolViolation,
    TransportError,
    VersionMismatch,
)
from ..grounding import SegmentationResult, SegmentMask
from . import wire
from .types import (
    BackendManifest,
    DenoiseRequest,
    DenoiseResponse,
    SegmentRequest,
)


def _parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class RemoteBackend:
    def __init__(
        self,
        endpoint: str,
        retries: int = 2,
        timeout: float = 30.0,
        max_inflight: int = 8,
    ):
        self._addr = _parse_endpoint(endpoint)
        self._retries = retries
        self._timeout = timeout
        self._gate = threading.Semaphore(max_inflight)
        self._ids = itertools.count()
        self._id_prefix = uuid.uuid4().hex[:8]
        self._manifest: BackendManifest | None = None
        self._manifest_lock = threading.Lock()

    # transport

    def _roundtrip(self, envelope: Mapping) -> dict:
        data = wire.encode_envelope(envelope)
        with self._gate:
            try:
                with socket.create_connection(self._addr, timeout=self._timeout) as conn:
                    conn.sendall(data)
                    reader = conn.makefile("rb")
                    line = reader.readline()
            except OSError as exc:
                raise TransportError(f"{self._addr}: {exc}") from exc
        if not line:
            raise TransportError(f"{self._addr}: connection closed before response")
        return wire.decode_envelope(line)

    def _call(self, op: str, payload: Mapping) -> dict:
        envelope = {
            "id": f"{self._id_prefix}-{next(self._ids)}",
            "op": op,
            "payload": payload,
        }
        attempt = 0
        while True:
            try:
                response = self._roundtrip(envelope)
                break
            except TransportError:
                if attempt >= self._retries:
                    raise
                time.sleep(0.1 * 2**attempt)
                attempt += 1
        if response.get("id") != envelope["id"]:
            raise ProtocolViolation("response id does not match request")
        if "error" in response:
            err = response["error"]
            code = err.get("code", wire.ERR_INTERNAL)
            message = f"{code}: {err.get('message', '')}"
            if code == wire.ERR_DIMS_MISMATCH:
                raise DimsMismatch(message)
            raise BackendError(message)
        result = response.get("result")
        if not isinstance(result, dict):
            raise ProtocolViolation("response carries neither result nor error")
        return result

    # operations

    def manifest(self) -> BackendManifest:
        with self._manifest_lock:
            if self._manifest is None:
                manifest = BackendManifest.from_payload(self._call(wire.OP_MANIFEST, {}))
                if manifest.protocol != wire.PROTOCOL_VERSION:
                    raise VersionMismatch(
                        f"endpoint speaks protocol {manifest.protocol!r}, "
                        f"client needs {wire.PROTOCOL_VERSION!r}"
                    )
                self._manifest = manifest
            return self._manifest

    def denoise(self, request: DenoiseRequest) -> DenoiseResponse:
        manifest = self.manifest()
        payload = wire.denoise_payload(
            request.z, request.step, request.prompt, request.entities, request.branch
        )
        result = self._call(wire.OP_DENOISE, payload)
        h, w, channels = request.z.shape
        c = (channels - 1) // 2
        eps = wire.tensor_from_field(result.get("eps"))
        if eps.shape != (h, w, c):
            raise DimsMismatch(f"eps dims {eps.shape} != expected {(h, w, c)}")
        attention = tuple(
            wire.tensor_from_field(field) for field in result.get("attention", [])
        )
        if request.branch == "cond" and manifest.attention_maps:
            if len(attention) != len(request.entities):
                raise ProtocolViolation(
                    f"{len(attention)} attention maps for {len(request.entities)} entities"
                )
            pixel_dims = (h * manifest.downscale, w * manifest.downscale)
            for amap in attention:
                if amap.shape != pixel_dims:
                    raise DimsMismatch(
                        f"attention dims {amap.shape} != pixel dims {pixel_dims}"
                    )
        return DenoiseResponse(eps=eps, attention=attention)

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        manifest = self.manifest()
        result = self._call(wire.OP_ENCODE, wire.encode_payload(pixels))
        latent = wire.tensor_from_field(result.get("latent"))
        f = manifest.downscale
        expected = (pixels.shape[0] // f, pixels.shape[1] // f)
        if latent.ndim != 3 or latent.shape[:2] != expected:
            raise DimsMismatch(f"latent dims {latent.shape} != expected {expected}+(C,)")
        return latent

    def decode(self, latent: np.ndarray) -> np.ndarray:
        manifest = self.manifest()
        result = self._call(wire.OP_DECODE, wire.decode_payload(latent))
        pixels = wire.tensor_from_field(result.get("pixels"))
        f = manifest.downscale
        expected = (latent.shape[0] * f, latent.shape[1] * f, 3)
        if pixels.shape != expected:
            raise DimsMismatch(f"pixel dims {pixels.shape} != expected {expected}")
        return pixels

    def segment(self, request: SegmentRequest) -> SegmentationResult:
        payload = wire.segment_payload(
            request.image, request.mode, request.box, request.points
        )
        result = self._call(wire.OP_SEGMENT, payload)
        masks_field = result.get("masks")
        if not isinstance(masks_field, list):
            raise ProtocolViolation("segment response must carry a mask list")
        image_dims = request.image.shape[:2]
        masks = []
        for field in masks_field:
            mask = wire.tensor_from_field(field.get("mask"))
            if mask.shape != image_dims:
                raise DimsMismatch(f"mask dims {mask.shape} != image dims {image_dims}")
            masks.append(
                SegmentMask(
                    mask, int(field["area"]), tuple(float(v) for v in field["bbox"])
                )
            )
        if request.mode == "prompt" and len(masks) != 1:
            raise ProtocolViolation(f"prompt mode must return 1 mask, got {len(masks)}")
        if request.mode == "auto":
            areas = [m.area for m in masks]
            if areas != sorted(areas, reverse=True):
                raise ProtocolViolation("auto masks must be sorted by area descending")
        return SegmentationResult(tuple(masks))
