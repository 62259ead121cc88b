"""Serve an in-process backend over wire protocol v1 (line-delimited JSON
over TCP). Used by the `serve-mock` CLI and by the conformance tooling."""

from __future__ import annotations

import logging
import socketserver
import threading
from typing import Mapping

from ..errors import BackendError, DimsMismatch, ProtocolViolation, XsynError
from ..grounding import GroundingEntity
from ..refine import Polarity, PointPrompt
from . import wire
from .types import DenoiseRequest, SegmentRequest

log = logging.getLogger(__name__)


def handle_payload(backend, op: str, payload: Mapping) -> dict:
    """Dispatch one decoded request payload; returns the result payload."""
    if not isinstance(payload, Mapping):
        raise ProtocolViolation("payload must be an object")
    if op == wire.OP_MANIFEST:
        return backend.manifest().to_payload()
    if op == wire.OP_DENOISE:
        z = wire.tensor_from_field(payload["z"])
        if z.ndim != 3 or z.shape[2] < 3 or z.shape[2] % 2 == 0:
            raise DimsMismatch(f"denoise input must be (h,w,2C+1), got {z.shape}")
        entities = tuple(
            GroundingEntity(str(e["text"]), tuple(float(v) for v in e["box"]))
            for e in payload["entities"]
        )
        response = backend.denoise(
            DenoiseRequest(
                z,
                int(payload["step"]),
                str(payload["prompt"]),
                entities,
                str(payload["branch"]),
            )
        )
        return {
            "eps": wire.tensor_field(response.eps),
            "attention": [wire.tensor_field(a) for a in response.attention],
        }
    if op == wire.OP_ENCODE:
        pixels = wire.tensor_from_field(payload["pixels"])
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DimsMismatch(f"encode input must be (H,W,3), got {pixels.shape}")
        return {"latent": wire.tensor_field(backend.encode(pixels))}
    if op == wire.OP_DECODE:
        latent = wire.tensor_from_field(payload["latent"])
        if latent.ndim != 3:
            raise DimsMismatch(f"decode input must be (h,w,C), got {latent.shape}")
        return {"pixels": wire.tensor_field(backend.decode(latent))}
    if op == wire.OP_SEGMENT:
        image = wire.tensor_from_field(payload["image"])
        mode = str(payload["mode"])
        box = None
        points: tuple[PointPrompt, ...] = ()
        if mode == "prompt":
            box = tuple(float(v) for v in payload["box"])
            points = tuple(
                PointPrompt(float(p["x"]), float(p["y"]), Polarity(p["polarity"]))
                for p in payload.get("points", [])
            )
        result = backend.segment(SegmentRequest(image, mode, box, points))
        return {
            "masks": [
                {
                    "mask": wire.tensor_field(m.mask),
                    "area": m.area,
                    "bbox": [float(v) for v in m.bbox],
                }
                for m in result.masks
            ]
        }
    raise LookupError(op)


def handle_envelope(backend, envelope: Mapping) -> dict:
    request_id = envelope.get("id", "") if isinstance(envelope, Mapping) else ""

    def error(code: str, message: str) -> dict:
        return {"id": request_id, "error": {"code": code, "message": message}}

    try:
        op = envelope["op"]
        payload = envelope["payload"]
    except (KeyError, TypeError):
        return error(wire.ERR_BAD_REQUEST, "envelope needs 'id', 'op', 'payload'")
    try:
        result = handle_payload(backend, op, payload)
    except LookupError:
        return error(wire.ERR_UNSUPPORTED, f"unknown op {op!r}")
    except DimsMismatch as exc:
        return error(wire.ERR_DIMS_MISMATCH, str(exc))
    except (ProtocolViolation, BackendError, KeyError, TypeError, ValueError) as exc:
        return error(wire.ERR_BAD_REQUEST, str(exc))
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error handling %s", envelope.get("op"))
        return error(wire.ERR_INTERNAL, str(exc))
    return {"id": request_id, "result": result}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            line = self.rfile.readline()
            if not line:
                return
            if not line.strip():
                continue
            try:
                envelope = wire.decode_envelope(line)
            except XsynError as exc:
                response = {
                    "id": "",
                    "error": {"code": wire.ERR_BAD_REQUEST, "message": str(exc)},
                }
            else:
                response = handle_envelope(self.server.backend, envelope)
            self.wfile.write(wire.encode_envelope(response))
            self.wfile.flush()


class BackendServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, backend, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.backend = backend

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def serve(backend, host: str, port: int) -> BackendServer:
    return BackendServer(backend, host, port)
