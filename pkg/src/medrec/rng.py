"""Named random substreams.

All randomness in the package flows from a single master seed. Each
consumer asks for a stream by label; the (seed, label) pair is hashed into
an independent generator, so adding a new consumer never perturbs the draws
of existing ones. Hashing goes through SHA-256, which keeps streams stable
across platforms and interpreter runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for the substream named ``label`` under ``seed``."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))
