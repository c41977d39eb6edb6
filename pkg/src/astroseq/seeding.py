"""Deterministic RNG streams fanned out from a single 64-bit seed.

Every consumer names its stream with small integer indices; the master
seed plus that index tuple feeds a SeedSequence, so streams are
independent, reproducible, and stable under code reordering.
"""

from __future__ import annotations

import numpy as np

STREAM_DATA = 0
STREAM_INIT = 1
STREAM_DROPOUT = 2
STREAM_SHUFFLE = 3

_MASK = (1 << 64) - 1


def spawn(seed: int, *stream: int) -> np.random.Generator:
    """A generator for the given stream of the master seed."""
    entropy = (int(seed) & _MASK, *[int(s) & _MASK for s in stream])
    return np.random.default_rng(np.random.SeedSequence(entropy))
