"""Deterministic random streams.

Every Monte Carlo draw in the package comes from a Philox generator keyed by
``SeedSequence(entropy=seed, spawn_key=key)``.  ``seed`` is the user seed
(an int or a tuple of ints, so callers can nest keys) and ``key`` names the
purpose and the chunk index.  Philox is counter based, so a stream is fully
determined by its key: results never depend on thread scheduling or on how
many workers are used, only on the seed and on the fixed chunk size.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

SeedLike = Union[int, Sequence[int]]

# Purpose tags, kept distinct so that streams never collide.
TAG_INTEGRAL = 1
TAG_JOINT = 2
TAG_SAMPLER_COUNTS = 3
TAG_SAMPLER_POINTS = 4
TAG_GNZ = 5
TAG_RECURSION = 6
TAG_FALSIFIER = 7
TAG_PROBES = 8
TAG_MEASURE = 9
TAG_TRANSFORM = 10

CHUNK = 1 << 15


def as_seed_tuple(seed: SeedLike) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        return (int(seed),)
    out = tuple(int(s) for s in seed)
    if any(s < 0 for s in out):
        raise ValueError("seed components must be nonnegative")
    return out


def child_seed(seed: SeedLike, *key: int) -> tuple[int, ...]:
    """Append key components to a seed; used to hand sub-seeds to callees."""
    return as_seed_tuple(seed) + tuple(int(k) for k in key)


def stream(seed: SeedLike, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=list(as_seed_tuple(seed)), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def chunk_sizes(total: int, chunk: int = CHUNK) -> list[int]:
    if total <= 0:
        return []
    full, rest = divmod(total, chunk)
    return [chunk] * full + ([rest] if rest else [])
