"""Seed handling.

Every random stream in the package is derived from a root integer seed and a
tuple of integer keys::

    rng = np.random.default_rng(np.random.SeedSequence(root, spawn_key=keys))

Keys name the purpose of the stream (see the ``STREAM_*`` constants) and, where
relevant, the trial and user index. Because a stream depends only on
``(root, keys)``, results do not depend on execution order or thread count.
"""

from __future__ import annotations

import numpy as np

STREAM_PROFILES = 1
STREAM_TRACES = 2
STREAM_NOISE = 3
STREAM_CHANNEL = 4
STREAM_PERMUTATION = 5
STREAM_TRIAL = 6
STREAM_ORACLE = 7
STREAM_BOOTSTRAP = 8


def derive_rng(seed: int | None, *keys: int) -> np.random.Generator:
    """Return the generator for stream ``keys`` under root ``seed``."""
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def derive_seed(seed: int | None, *keys: int) -> int | None:
    """Return a 63-bit integer seed for a child stream, for passing to public APIs."""
    if seed is None:
        return None
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    hi, lo = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) >> 1
