"""XTEN v1: minimal binary tensor container.

Layout: magic "XTEN", u8 version (1), u8 dtype code (1 = float32),
u8 rank, one zero pad byte, rank little-endian u32 dims, then the raw
little-endian float32 payload in row-major order.
"""

from __future__ import annotations

import base64
import struct
from pathlib import Path

import numpy as np

from .errors import ProtocolViolation

MAGIC = b"XTEN"
VERSION = 1
DTYPE_FLOAT32 = 1
MAX_RANK = 8


def to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ValueError(f"unsupported rank {arr.ndim}")
    header = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_FLOAT32, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes()


def from_bytes(data: bytes, require_finite: bool = False) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ProtocolViolation("bad XTEN magic")
    version, dtype, rank, pad = struct.unpack("<BBBB", data[4:8])
    if version != VERSION:
        raise ProtocolViolation(f"unsupported XTEN version {version}")
    if dtype != DTYPE_FLOAT32:
        raise ProtocolViolation(f"unsupported XTEN dtype code {dtype}")
    if rank < 1 or rank > MAX_RANK or pad != 0:
        raise ProtocolViolation("corrupt XTEN header")
    dims_end = 8 + 4 * rank
    if len(data) < dims_end:
        raise ProtocolViolation("truncated XTEN dims")
    dims = struct.unpack(f"<{rank}I", data[8:dims_end])
    expected = int(np.prod(dims)) * 4
    payload = data[dims_end:]
    if len(payload) != expected:
        raise ProtocolViolation(
            f"XTEN payload length {len(payload)} != dims product {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if require_finite and not np.isfinite(arr).all():
        raise ProtocolViolation("XTEN payload contains non-finite values")
    return arr


def write(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(arr))


def read(path: str | Path, require_finite: bool = False) -> np.ndarray:
    return from_bytes(Path(path).read_bytes(), require_finite=require_finite)


def to_b64(arr: np.ndarray) -> str:
    return base64.b64encode(to_bytes(arr)).decode("ascii")


def from_b64(text: str, require_finite: bool = False) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise ProtocolViolation(f"invalid base64 tensor: {exc}") from exc
    return from_bytes(raw, require_finite=require_finite)
