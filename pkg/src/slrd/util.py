"""Small shared helpers: seeding sub-streams and array validation."""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DataError


def substream_seed(seed: int, stream: str) -> int:
    """Derive a 64-bit seed for a named random sub-stream.

    Uses keyed blake2b so distinct stream names give statistically
    independent seeds while remaining stable across platforms and runs.
    """
    h = hashlib.blake2b(
        int(seed).to_bytes(8, "little", signed=False),
        digest_size=8,
        person=stream.encode("ascii"),
    )
    return int.from_bytes(h.digest(), "little")


def as_f64(a, name: str = "array") -> np.ndarray:
    """Widen input to a C-contiguous float64 array, rejecting non-finite data."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if not np.isfinite(out).all():
        raise DataError(f"{name} contains non-finite entries")
    return out


def require_shape(a: np.ndarray, shape: tuple, name: str = "array") -> None:
    if a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
