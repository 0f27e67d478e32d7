"""Purpose-keyed random streams.

Every random draw in training comes from a Philox generator keyed by
``(seed, iteration, purpose)``. Toggling one consumer (say, the SDS branch)
therefore never shifts the numbers another consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def keyed_rng(seed: int, iteration: int, purpose: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(iteration), _tag(purpose)))
    return np.random.Generator(np.random.Philox(ss))
