"""Golden transcript: recorded request/response pairs proving the wire
protocol carries complete state. Any conforming service must answer every
recorded request with a payload whose canonical JSON is byte-equal."""

from __future__ import annotations

import json
from pathlib import Path

import threading

import numpy as np

from ..errors import BackendError
from ..grounding import GroundingEntity
from ..noise import noise_field
from ..refine import PointPrompt, Polarity
from . import wire
from .remote import RemoteBackend
from .server import handle_payload


def _mini_scene() -> np.ndarray:
    """16x16 planted scene: background, baggage, one item, one clutter."""
    plane = np.full((16, 16), np.float32(4 / 64), dtype=np.float32)
    plane[1:15, 1:15] = np.float32(8 / 64)
    plane[4:9, 4:9] = np.float32(16 / 64)
    plane[10:14, 10:14] = np.float32(24 / 64)
    return np.stack([plane, plane, plane], axis=-1)


def build_golden_requests() -> list[tuple[str, dict]]:
    scene = _mini_scene()
    z = noise_field("golden|z", (4, 4, 9))
    latent = noise_field("golden|latent", (2, 2, 4))
    entity = GroundingEntity("Knife", (4.0, 4.0, 20.0, 20.0))
    points = (
        PointPrompt(6.0, 6.0, Polarity.FOREGROUND),
        PointPrompt(2.0, 2.0, Polarity.BACKGROUND),
    )
    return [
        (wire.OP_MANIFEST, {}),
        (wire.OP_ENCODE, wire.encode_payload(scene)),
        (wire.OP_DECODE, wire.decode_payload(latent)),
        (wire.OP_DENOISE, wire.denoise_payload(z, 980, "", (), "uncond")),
        (wire.OP_DENOISE, wire.denoise_payload(z, 980, "Knife", (entity,), "cond")),
        (wire.OP_SEGMENT, wire.segment_payload(scene, "auto")),
        (
            wire.OP_SEGMENT,
            wire.segment_payload(scene, "prompt", (3.0, 3.0, 10.0, 10.0), points),
        ),
    ]


def record_transcript(backend) -> list[dict]:
    entries = []
    for op, payload in build_golden_requests():
        result = handle_payload(backend, op, payload)
        entries.append({"op": op, "payload": payload, "result": result})
    return entries


def write_transcript(path: str | Path, entries: list[dict]) -> None:
    with open(path, "wb") as fh:
        for entry in entries:
            fh.write(wire.canonical_json_bytes(entry) + b"\n")


def load_transcript(path: str | Path) -> list[dict]:
    entries = []
    for line in Path(path).read_bytes().splitlines():
        if line.strip():
            entries.append(json.loads(line.decode("utf-8")))
    return entries


class _PayloadBackend(RemoteBackend):
    """A RemoteBackend whose transport is replaced; keeps all the request
    building and response validation, drops the socket."""

    def __init__(self):
        self._manifest = None
        self._manifest_lock = threading.Lock()

    def _call(self, op, payload):
        raise NotImplementedError


class RecordingBackend(_PayloadBackend):
    """Wraps a live backend and records every wire-level request/response."""

    def __init__(self, backend):
        super().__init__()
        self._backend = backend
        self.records: list[dict] = []

    def _call(self, op, payload):
        result = handle_payload(self._backend, op, payload)
        self.records.append(
            {"op": op, "digest": wire.request_digest(op, payload), "result": result}
        )
        return result


class ReplayBackend(_PayloadBackend):
    """Serves recorded responses by request digest; any unrecorded request
    is an error, so a green replay proves the recording carried complete
    state."""

    def __init__(self, records: list[dict]):
        super().__init__()
        self._by_digest = {r["digest"]: r["result"] for r in records}

    def _call(self, op, payload):
        digest = wire.request_digest(op, payload)
        result = self._by_digest.get(digest)
        if result is None:
            raise BackendError(f"no recorded response for {op} request {digest[:12]}")
        return result
