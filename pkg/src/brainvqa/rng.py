"""Deterministic, parallelism-independent random streams.

Every random decision in the toolkit draws from a counter-based Philox
generator keyed by a hash of ``(seed, *names)``.  Two runs with the same seed
produce identical streams regardless of worker count or scheduling, because
each work unit derives its own stream from its stable key rather than sharing
a sequential generator.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *names: object) -> np.random.Generator:
    """Return an independent generator keyed by ``(seed, *names)``.

    ``names`` are converted to strings; use stable identifiers (study id,
    label name, stream purpose), never object reprs that embed addresses.
    """
    material = ":".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)  # Philox takes a 128-bit key
    return np.random.Generator(np.random.Philox(key=key))
