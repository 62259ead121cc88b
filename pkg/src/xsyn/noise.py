"""Hash-counter noise streams and a tiny deterministic RNG.

Every random value in the pipeline is derived from SHA-256 of a textual tag
plus a block counter, so results are reproducible bit-for-bit across runs,
platforms, and independent implementations of the same stream definition
(see PROTOCOL.md, "Value noise stream").
"""

from __future__ import annotations

import hashlib
import struct
from typing import Sequence

import numpy as np

_INV_2_53 = float(2.0**-53)


def _digest_blocks(tag: str, n_blocks: int) -> np.ndarray:
    """Concatenate SHA256(SHA256(tag) || LE64(i)) for i in [0, n_blocks)."""
    prefix = hashlib.sha256(tag.encode("utf-8")).digest()
    out = bytearray()
    for i in range(n_blocks):
        h = hashlib.sha256(prefix)
        h.update(struct.pack("<Q", i))
        out += h.digest()
    return np.frombuffer(bytes(out), dtype="<u8")


def uniform_field(tag: str, shape: Sequence[int]) -> np.ndarray:
    """float64 values in [0, 1), row-major, 4 values per hash block."""
    n = int(np.prod(shape)) if len(shape) else 1
    blocks = (n + 3) // 4
    u64 = _digest_blocks(tag, blocks)[:n]
    # Top 53 bits scaled by 2^-53: exact in float64.
    u = (u64 >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return u.reshape(tuple(shape))


def noise_field(tag: str, shape: Sequence[int]) -> np.ndarray:
    """float32 values in [-1, 1), derived from the uniform stream."""
    u = uniform_field(tag, shape)
    return (2.0 * u - 1.0).astype(np.float32)


class ScriptedRng:
    """Deterministic integer RNG over the same hash-counter stream.

    One 64-bit draw per counter increment. Modulo reduction carries a bias
    of at most range/2^64, far below anything the tests can resolve.
    """

    def __init__(self, tag: str):
        self._prefix = hashlib.sha256(tag.encode("utf-8")).digest()
        self._counter = 0

    def next_u64(self) -> int:
        h = hashlib.sha256(self._prefix)
        h.update(struct.pack("<Q", self._counter))
        self._counter += 1
        return struct.unpack("<Q", h.digest()[:8])[0]

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + self.next_u64() % (hi - lo)

    def choice(self, seq):
        if not len(seq):
            raise ValueError("choice from empty sequence")
        return seq[self.next_u64() % len(seq)]


def derive_rng(seed: int, *parts: str) -> ScriptedRng:
    """Purpose-scoped RNG so consumers cannot perturb each other's draws."""
    return ScriptedRng("|".join([str(seed), *parts]))
