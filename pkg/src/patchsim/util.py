"""Seed derivation and small shared helpers."""

import hashlib

import numpy as np


def derive_seed(master, *parts):
    """Stable 64-bit seed for a (master seed, stage..., index...) path.

    SHA-256 based so per-stage and per-class streams stay independent of each
    other, of call order, and of the platform.
    """
    key = "|".join(str(p) for p in (master, *parts))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master, *parts):
    """Generator seeded from the derived stream for the given path."""
    return np.random.default_rng(derive_seed(master, *parts))
