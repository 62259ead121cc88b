"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class XsynError(Exception):
    """Base class for all pipeline errors."""


class DatasetError(XsynError):
    """Annotation file failed to parse or violates referential integrity."""


class ConfigError(XsynError):
    """Invalid or inconsistent run configuration."""


class NoForegroundError(XsynError):
    """No usable annotation remains after small-box filtering."""


class NoIdleRegionError(XsynError):
    """No background segment satisfies the idle-region criterion."""


class OcclusionSkipped(XsynError):
    """No occluder candidate found; the image ships unoccluded."""


class NumericalError(XsynError):
    """Non-finite values appeared in a latent during sampling."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


class BackendError(XsynError):
    """A backend call failed."""


class TransportError(BackendError):
    """The remote endpoint could not be reached or dropped the connection."""


class ProtocolViolation(BackendError):
    """The remote endpoint answered with a malformed or inconsistent message."""


class DimsMismatch(ProtocolViolation):
    """Tensor dimensions are inconsistent with the operation's contract."""


class VersionMismatch(BackendError):
    """The remote endpoint speaks an incompatible protocol version."""
