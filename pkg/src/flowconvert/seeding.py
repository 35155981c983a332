"""Deterministic RNG derivation.

Every random draw in the package flows from a master seed through
named sub-streams, so results never depend on execution order or worker
count. Tags are hashed (not summed) so distinct tag tuples can never
collide into the same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _entropy(seed: int, tags: tuple) -> list[int]:
    digest = hashlib.sha256(repr(tags).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, *words]


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """A generator for the sub-stream named by ``tags`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(seed, tags)))


def derive_int(seed: int, *tags) -> int:
    """A stable 63-bit integer seed for the sub-stream named by ``tags``."""
    return int(derive_rng(seed, *tags).integers(0, 2**63 - 1))
