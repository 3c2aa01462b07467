"""Deterministic random streams derived from a single run seed.

Every source of randomness in the package draws from a named substream so
that one --seed value reproduces a whole run bit for bit.  Names are hashed
with sha256, never with Python's salted hash().
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_digest(*parts) -> int:
    """64-bit integer digest of the given parts, stable across processes."""
    joined = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(joined.encode("utf-8")).digest()[:8], "little")


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for the (seed, *names) substream."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, stable_digest(*names)]))


def substream_int(seed: int, *names) -> int:
    """Plain integer seed (e.g. for torch) derived from a named substream."""
    return stable_digest(seed, *names) & 0x7FFFFFFF
