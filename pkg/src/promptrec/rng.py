"""Seeded random streams.

Every consumer of randomness draws from its own PCG64 stream, derived from
the user seed and a purpose code through ``numpy.random.SeedSequence``'s
spawn key. PCG64 and SeedSequence are documented, platform-independent
algorithms, so a stream can be reproduced outside this package from
``(seed, purpose, *extra)`` alone.
"""

from __future__ import annotations

import numpy as np

SPLIT = 1
GENERATOR = 2
INIT = 3
SHUFFLE = 4
PRETRAIN = 5
FINETUNE = 6


def stream(seed: int, purpose: int, *extra: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), *map(int, extra)))
    return np.random.Generator(np.random.PCG64(ss))
