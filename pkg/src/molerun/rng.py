"""Deterministic random stream derivation.

Every stochastic component draws from its own stream, derived from the run's
master seed plus a label path (e.g. the environment name, an island index).
Streams are independent of each other and stable across platforms and Python
versions: label paths are hashed with SHA-256 and the resulting seed feeds
``random.Random``, whose sequence for a given seed is guaranteed stable by the
stdlib.
"""

from __future__ import annotations

import hashlib
import random

__all__ = ["derive_seed", "stream"]


def derive_seed(master: int, *labels: str | int) -> int:
    """Derive a child seed from a master seed and a label path."""
    h = hashlib.sha256()
    h.update(str(master).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "big")


def stream(master: int, *labels: str | int) -> random.Random:
    """A fresh RNG for the stream identified by (master, labels)."""
    return random.Random(derive_seed(master, *labels))
