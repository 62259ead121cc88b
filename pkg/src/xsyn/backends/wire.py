"""Wire protocol v1: JSON envelopes over a line-delimited byte stream.

Request:  {"id": str, "op": str, "payload": object}
Response: {"id": str, "result": object} | {"id": str, "error": {"code", "message"}}

Tensors travel as {"xten_b64": "<base64 XTEN bytes>"}. Canonical JSON
(sorted keys, compact separators, UTF-8) defines both the scripted-response
digests and the conformance byte-equality checks; see PROTOCOL.md.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any, Mapping

import numpy as np

from .. import tensorio
from ..errors import ProtocolViolation

PROTOCOL_VERSION = "1"

OP_MANIFEST = "manifest"
OP_DENOISE = "denoise"
OP_ENCODE = "encode"
OP_DECODE = "decode"
OP_SEGMENT = "segment"
ALL_OPS = (OP_MANIFEST, OP_DENOISE, OP_ENCODE, OP_DECODE, OP_SEGMENT)

ERR_BAD_REQUEST = "BAD_REQUEST"
ERR_DIMS_MISMATCH = "DIMS_MISMATCH"
ERR_INTERNAL = "INTERNAL"
ERR_UNSUPPORTED = "UNSUPPORTED"


def canonical_json_bytes(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def request_digest(op: str, payload: Mapping) -> str:
    """Hex digest that scripted backends key their responses on."""
    return hashlib.sha256(canonical_json_bytes({"op": op, "payload": payload})).hexdigest()


def tensor_field(arr: np.ndarray) -> dict:
    return {"xten_b64": tensorio.to_b64(arr)}


def tensor_from_field(field: Any, require_finite: bool = True) -> np.ndarray:
    if not isinstance(field, Mapping) or "xten_b64" not in field:
        raise ProtocolViolation("expected a tensor field {'xten_b64': ...}")
    return tensorio.from_b64(field["xten_b64"], require_finite=require_finite)


def encode_envelope(obj: Mapping) -> bytes:
    return canonical_json_bytes(obj) + b"\n"


def decode_envelope(line: bytes) -> dict:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolViolation(f"malformed envelope: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolViolation("envelope must be a JSON object")
    return obj


# Payload builders (the one place request schemas are spelled out).


def denoise_payload(z: np.ndarray, step: int, prompt: str, entities, branch: str) -> dict:
    return {
        "z": tensor_field(z),
        "step": int(step),
        "prompt": prompt,
        "entities": [
            {"text": e.entity_text, "box": [float(v) for v in e.box]} for e in entities
        ],
        "branch": branch,
    }


def encode_payload(pixels: np.ndarray) -> dict:
    return {"pixels": tensor_field(pixels)}


def decode_payload(latent: np.ndarray) -> dict:
    return {"latent": tensor_field(latent)}


def segment_payload(image: np.ndarray, mode: str, box=None, points=()) -> dict:
    payload: dict = {"image": tensor_field(image), "mode": mode}
    if mode == "prompt":
        payload["box"] = [float(v) for v in box]
        payload["points"] = [
            {"x": float(p.x), "y": float(p.y), "polarity": p.polarity.value}
            for p in points
        ]
    return payload
