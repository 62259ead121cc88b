"""Wire protocol v1 service: line-delimited JSON envelopes over TCP.

MOCK mode answers from the scripted generators; ADAPTER mode forwards the
five operations to a user-supplied model stack object.
"""

from __future__ import annotations

import importlib
import json
import logging
import socketserver
import threading
from dataclasses import dataclass

import numpy as np

from . import generators, xten
from .generators import RequestRejected, WrongDims
from .xten import XtenError

log = logging.getLogger(__name__)

BAD_REQUEST = "BAD_REQUEST"
DIMS_MISMATCH = "DIMS_MISMATCH"
INTERNAL = "INTERNAL"
UNSUPPORTED = "UNSUPPORTED"


@dataclass
class BridgeConfig:
    mode: str = "mock"  # "mock" | "adapter"
    host: str = "127.0.0.1"
    port: int = 8641
    downscale: int = generators.DOWNSCALE_DEFAULT
    timesteps: int = generators.TIMESTEPS_DEFAULT
    adapter: str = ""  # "package.module:factory" for adapter mode

    def __post_init__(self):
        if self.mode not in ("mock", "adapter"):
            raise ValueError(f"mode must be mock or adapter, got {self.mode!r}")
        if self.mode == "adapter" and not self.adapter:
            raise ValueError("adapter mode needs --adapter package.module:factory")


class MockEngine:
    """Implements the five operations per PROTOCOL.md section 5."""

    def __init__(self, downscale: int, timesteps: int):
        self.downscale = downscale
        self.timesteps = timesteps

    def manifest(self, payload: dict) -> dict:
        return generators.manifest_payload(self.downscale, self.timesteps)

    def denoise(self, payload: dict) -> dict:
        z = xten.from_field(payload["z"])
        if z.ndim != 3 or z.shape[2] < 3 or z.shape[2] % 2 == 0:
            raise WrongDims(f"denoise wants (h,w,2C+1), got {z.shape}")
        step = int(payload["step"])
        if not 0 <= step < self.timesteps:
            raise RequestRejected(f"step {step} outside schedule")
        branch = payload["branch"]
        if branch not in ("cond", "uncond"):
            raise RequestRejected(f"unknown branch {branch!r}")
        h, w, channels = z.shape
        digest = generators.request_digest("denoise", payload)
        eps = generators.predicted_noise(digest, (h, w, (channels - 1) // 2))
        attention = []
        if branch == "cond":
            for entity in payload["entities"]:
                attention.append(
                    xten.field(
                        generators.attention_map(
                            entity["box"], step, h * self.downscale, w * self.downscale
                        )
                    )
                )
        return {"eps": xten.field(eps), "attention": attention}

    def encode(self, payload: dict) -> dict:
        pixels = xten.from_field(payload["pixels"])
        return {"latent": xten.field(generators.encode_pixels(pixels, self.downscale))}

    def decode(self, payload: dict) -> dict:
        latent = xten.from_field(payload["latent"])
        return {"pixels": xten.field(generators.decode_latent(latent, self.downscale))}

    def segment(self, payload: dict) -> dict:
        image = xten.from_field(payload["image"])
        mode = payload["mode"]
        if mode == "auto":
            entries = generators.segment_auto(image)
        elif mode == "prompt":
            entries = [
                generators.segment_prompt(image, payload["box"], payload.get("points", []))
            ]
        else:
            raise RequestRejected(f"unknown segmentation mode {mode!r}")
        return {
            "masks": [
                {"mask": xten.field(e["mask"]), "area": e["area"], "bbox": e["bbox"]}
                for e in entries
            ]
        }


class AdapterEngine:
    """Forwards operations to a model stack built by `module:factory`.

    The factory returns an object with manifest()/denoise()/encode()/
    decode()/segment() working on numpy arrays and plain dicts; this shell
    only translates the wire payloads.
    """

    def __init__(self, spec: str):
        module_name, _, attr = spec.partition(":")
        if not module_name or not attr:
            raise ValueError("adapter spec must be package.module:factory")
        module = importlib.import_module(module_name)
        self.stack = getattr(module, attr)()

    def manifest(self, payload: dict) -> dict:
        return self.stack.manifest()

    def denoise(self, payload: dict) -> dict:
        z = xten.from_field(payload["z"])
        eps, attention = self.stack.denoise(
            z, int(payload["step"]), payload["prompt"], payload["entities"], payload["branch"]
        )
        return {
            "eps": xten.field(np.asarray(eps, dtype=np.float32)),
            "attention": [xten.field(np.asarray(a, dtype=np.float32)) for a in attention],
        }

    def encode(self, payload: dict) -> dict:
        latent = self.stack.encode(xten.from_field(payload["pixels"]))
        return {"latent": xten.field(np.asarray(latent, dtype=np.float32))}

    def decode(self, payload: dict) -> dict:
        pixels = self.stack.decode(xten.from_field(payload["latent"]))
        return {"pixels": xten.field(np.asarray(pixels, dtype=np.float32))}

    def segment(self, payload: dict) -> dict:
        image = xten.from_field(payload["image"])
        entries = self.stack.segment(
            image, payload["mode"], payload.get("box"), payload.get("points", [])
        )
        return {
            "masks": [
                {
                    "mask": xten.field(np.asarray(e["mask"], dtype=np.float32)),
                    "area": int(e["area"]),
                    "bbox": [float(v) for v in e["bbox"]],
                }
                for e in entries
            ]
        }


def build_engine(config: BridgeConfig):
    if config.mode == "mock":
        return MockEngine(config.downscale, config.timesteps)
    return AdapterEngine(config.adapter)


def answer(engine, line: bytes) -> bytes:
    """One request line in, one response line out."""
    request_id = ""
    try:
        envelope = json.loads(line.decode("utf-8"))
        if not isinstance(envelope, dict):
            raise RequestRejected("envelope must be a JSON object")
        request_id = str(envelope.get("id", ""))
        op = envelope["op"]
        payload = envelope["payload"]
        if not isinstance(payload, dict):
            raise RequestRejected("payload must be an object")
        handler = getattr(engine, op, None)
        if op not in ("manifest", "denoise", "encode", "decode", "segment") or handler is None:
            return _error(request_id, UNSUPPORTED, f"unknown op {op!r}")
        result = handler(payload)
    except WrongDims as exc:
        return _error(request_id, DIMS_MISMATCH, str(exc))
    except (RequestRejected, XtenError, KeyError, TypeError, ValueError) as exc:
        return _error(request_id, BAD_REQUEST, str(exc))
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal failure")
        return _error(request_id, INTERNAL, str(exc))
    return generators.canonical({"id": request_id, "result": result}) + b"\n"


def _error(request_id: str, code: str, message: str) -> bytes:
    return generators.canonical(
        {"id": request_id, "error": {"code": code, "message": message}}
    ) + b"\n"


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            line = self.rfile.readline()
            if not line:
                return
            if not line.strip():
                continue
            self.wfile.write(answer(self.server.engine, line))
            self.wfile.flush()


class BridgeServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, config: BridgeConfig):
        super().__init__((config.host, config.port), _Handler)
        self.engine = build_engine(config)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def serve(config: BridgeConfig) -> BridgeServer:
    return BridgeServer(config)
