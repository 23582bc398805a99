"""Seed derivation and ordered parallel map shared by all stages.

Seeds: a master seed is fanned out with ``numpy.random.SeedSequence`` using
``spawn_key = (crc32(stage), *indices)``, so every (stage, index) pair gets an
independent, reproducible stream no matter how work is scheduled.
"""

from __future__ import annotations

import os
import zlib
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(master: int, stage: str, *indices: int) -> np.random.SeedSequence:
    key = (zlib.crc32(stage.encode()), *(int(i) for i in indices))
    return np.random.SeedSequence(int(master), spawn_key=key)


def rng_for(master: int, stage: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage, *indices))


def default_workers() -> int:
    env = os.environ.get("MULTIRET_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def map_ordered(
    fn: Callable[[T], R],
    items: Iterable[T],
    workers: int | None = None,
) -> list[R]:
    """Apply fn to every item, in parallel when workers > 1, keeping input order."""
    items = list(items)
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
