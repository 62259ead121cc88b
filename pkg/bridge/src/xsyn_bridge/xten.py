"""XTEN v1 codec: 'XTEN' magic, version byte, dtype byte (1 = float32),
rank byte, pad byte, little-endian u32 dims, raw float32 payload."""

from __future__ import annotations

import base64
import struct

import numpy as np


class XtenError(ValueError):
    pass


def dump(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = b"XTEN" + struct.pack("<BBBB", 1, 1, arr.ndim, 0)
    return header + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def parse(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != b"XTEN":
        raise XtenError("not an XTEN blob")
    version, dtype, rank, pad = struct.unpack("<BBBB", blob[4:8])
    if version != 1 or dtype != 1 or pad != 0 or not 1 <= rank <= 8:
        raise XtenError("unsupported XTEN header")
    end = 8 + 4 * rank
    if len(blob) < end:
        raise XtenError("truncated XTEN dims")
    dims = struct.unpack(f"<{rank}I", blob[8:end])
    if len(blob) - end != int(np.prod(dims)) * 4:
        raise XtenError("payload length does not match dims")
    arr = np.frombuffer(blob[end:], dtype="<f4").reshape(dims).copy()
    if not np.isfinite(arr).all():
        raise XtenError("non-finite values in tensor")
    return arr


def field(arr: np.ndarray) -> dict:
    return {"xten_b64": base64.b64encode(dump(arr)).decode("ascii")}


def from_field(obj) -> np.ndarray:
    if not isinstance(obj, dict) or "xten_b64" not in obj:
        raise XtenError("expected {'xten_b64': ...}")
    try:
        blob = base64.b64decode(obj["xten_b64"].encode("ascii"), validate=True)
    except Exception as exc:
        raise XtenError(f"bad base64: {exc}") from exc
    return parse(blob)
