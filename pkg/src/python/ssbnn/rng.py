"""
ssbnn Random Streams
====================

Named, seedable, splittable random streams. All randomness in the package
flows through ``numpy.random.Generator`` objects built here so a seed and a
stream name reproduce a run exactly.
"""

import zlib
from typing import List

import numpy as np

from .errors import InvalidParameterError

# Stream names used by the library and the CLI
INIT = "init"
TRAIN = "train"
PREDICT = "predict"
ORACLE = "oracle"


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_stream(seed: int, name: str = TRAIN) -> np.random.Generator:
    """Return the PCG64 generator for ``(seed, name)``."""
    if seed < 0:
        raise InvalidParameterError(f"seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name),))
    return np.random.Generator(np.random.PCG64(sequence))


def split(rng: np.random.Generator, count: int) -> List[np.random.Generator]:
    """Derive ``count`` independent child streams from ``rng``.

    The parent advances by one draw per child, so splitting is itself
    deterministic given the parent's state.
    """
    seeds = rng.integers(0, 2**63 - 1, size=count, dtype=np.int64)
    return [np.random.Generator(np.random.PCG64(int(s))) for s in seeds]


def open_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(shape)
    return np.where(u == 0.0, np.finfo(np.float64).tiny, u)
