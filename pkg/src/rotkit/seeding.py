"""Deterministic derivation of per-purpose random generators.

Every random decision in this package flows from a single user-facing
integer seed. Independent streams (data shuffling, weak augmentation,
mosaic augmentation, model init, ...) are derived by hashing the root
seed together with a purpose label and optional integer coordinates
(iteration, slot index, ...). The derivation is:

    sha256(repr((root, part_0, part_1, ...))) -> low 8 bytes -> uint64

which is stable across platforms and Python versions for int/str parts.
Two streams with different labels are independent for all practical
purposes; the same (root, parts) tuple always yields the same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["child_seed", "spawn"]


def child_seed(root: int, *parts: int | str) -> int:
    """Derive a 64-bit child seed from a root seed and a purpose path.

    Args:
        root: the run-level seed.
        parts: purpose label and coordinates, e.g. ``("mosaic", t, slot)``.
            Only ints and strings are allowed so the repr is unambiguous.

    Returns:
        An integer in ``[0, 2**64)`` usable with ``np.random.default_rng``.
    """
    for p in parts:
        if not isinstance(p, (int, str)):
            raise TypeError(f"seed path parts must be int or str, got {type(p).__name__}")
    payload = repr((int(root),) + tuple(parts)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def spawn(root: int, *parts: int | str) -> np.random.Generator:
    """Return a fresh Generator for the stream named by ``parts``."""
    return np.random.default_rng(child_seed(root, *parts))
