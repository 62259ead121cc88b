"""Backend contracts, deterministic in-process mocks, and the remote client."""

from .types import (
    BackendBundle,
    BackendManifest,
    DenoiseRequest,
    DenoiseResponse,
    SegmentRequest,
)
from .mock import ScriptedMockBackend
from .remote import RemoteBackend

__all__ = [
    "BackendBundle",
    "BackendManifest",
    "DenoiseRequest",
    "DenoiseResponse",
    "SegmentRequest",
    "ScriptedMockBackend",
    "RemoteBackend",
]
