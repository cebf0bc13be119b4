"""Deterministic seed derivation so one run seed drives every RNG."""

import hashlib

import numpy as np


def derive_seed(seed, *parts):
    """Stable 64-bit child seed from a root seed and string tags."""
    h = hashlib.sha256()
    h.update(str(seed).encode("utf-8"))
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(seed, *parts):
    return np.random.default_rng(derive_seed(seed, *parts))
