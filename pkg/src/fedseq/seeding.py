"""Deterministic RNG streams.

Every source of randomness in a run is a numpy Generator keyed by the
root seed plus a phase tag (and, where relevant, a round index), so that
results are bit-reproducible and independent of execution order.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

# Phase tags keep streams for unrelated purposes from colliding.
PHASE_INIT = 0
PHASE_PRETRAIN = 1
PHASE_LOCAL = 2
PHASE_SAMPLE = 3
PHASE_SHUFFLE = 4
PHASE_GROUP = 5
PHASE_DATA = 6
PHASE_CENTRAL = 7

SeedKey = Sequence[int] | int


def stream(seed: SeedKey, *parts: int) -> np.random.Generator:
    """Generator keyed by ``seed`` followed by integer ``parts``."""
    if isinstance(seed, (int, np.integer)):
        key = [int(seed)]
    else:
        key = [int(s) for s in seed]
    key.extend(int(p) for p in parts)
    return np.random.default_rng(key)
