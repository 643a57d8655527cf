"""Deterministic derivation of per-component RNG streams from one root seed.

Every stochastic operation in the package takes either an explicit seed or
a Generator derived here, so a single 64-bit root seed pins the whole run.
Streams are derived statelessly from (root, tags...) so any component can
be re-derived in isolation, e.g. when resuming training at a given step.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def child_seed(root: int, *tags) -> int:
    """64-bit child seed derived from a root seed and a tag path."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF] + [_tag_int(t) for t in tags])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(root: int, *tags) -> np.random.Generator:
    """PCG64 generator for the (root, tags...) stream."""
    return np.random.default_rng(child_seed(root, *tags))
