"""Named random substreams.

Every random consumer derives its generator from (seed, label) so that
adding a new consumer never shifts the streams of existing ones.  Labels
are slash-separated paths, e.g. "train/H/round3/pairs".
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_digest(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def derive_seed(seed: int, label: str) -> int:
    """Derive a 63-bit child seed from a parent seed and a stream label."""
    payload = seed.to_bytes(16, "little", signed=True) + label.encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little") >> 1


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for the named substream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), _label_digest(label)]))
