"""Deterministic RNG derivation so parallel stages stay reproducible."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(*parts: object) -> np.random.Generator:
    """Generator seeded from a stable hash of the given parts.

    Identical parts give identical streams on every platform and run, and
    distinct part tuples give independent streams.
    """
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def stable_unit_float(*parts: object) -> float:
    """Deterministic value in [0, 1) derived from a stable hash."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") / 2**64
