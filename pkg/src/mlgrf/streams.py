"""Named random-number streams.

All randomness in a run flows from one root seed through streams keyed by
(purpose, chain, level, iteration), so chains never share a stream, results
are reproducible bit-for-bit within this implementation, and parallel
execution order cannot change any draw.
"""

from __future__ import annotations

import numpy as np

PURPOSE_CHAIN = 0
PURPOSE_INIT = 1
PURPOSE_OBS_FIELD = 2
PURPOSE_OBS_NOISE = 3
PURPOSE_FIELD = 4


def rng_stream(
    seed: int,
    purpose: int,
    chain: int = 0,
    level: int = 0,
    iteration: int = 0,
) -> np.random.Generator:
    """Independent generator for one (purpose, chain, level, iteration) key."""
    key = (purpose, chain, level, iteration)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
