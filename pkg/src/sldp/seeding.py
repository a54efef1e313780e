"""Named random streams derived from a master seed.

Each purpose (client noise, batch order, attack queries, ...) gets its own
generator, so adding a stage to an experiment never shifts the draws seen
by another stage.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    key = [int(seed)] + [zlib.crc32(str(label).encode()) for label in labels]
    return np.random.default_rng(np.random.SeedSequence(key))
