"""Seed handling.

All randomness in the package flows from one integer seed through Philox
(counter-based) generators. Independent streams come from SeedSequence spawn
keys, so the same seed gives the same draws regardless of how many worker
threads exist or in which order streams are consumed.
"""

import numpy as np


def philox(seed: int, *stream: int) -> np.random.Generator:
    """Return the generator for `stream` under `seed`.

    Distinct stream tuples give statistically independent generators;
    the same (seed, stream) pair always gives identical draws.
    """
    ss = np.random.SeedSequence(seed, spawn_key=tuple(stream))
    return np.random.Generator(np.random.Philox(ss))
