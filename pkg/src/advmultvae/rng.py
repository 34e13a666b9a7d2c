"""Keyed random streams derived from a single experiment seed.

Each consumer asks for ``stream(seed, "dropout", epoch, batch)`` and gets an
independent generator; nothing is drawn from a shared global state, so any
draw can be reproduced from its key alone.
"""

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_key(name), *(int(c) for c in counters)))
    return np.random.Generator(np.random.PCG64(ss))
