"""Named random sub-streams derived from one root seed.

Every source of randomness in a run (data generation, training, evaluation
episodes, perturbation directions) gets its own stream keyed by a stable
hash of its name, so paired comparisons see identical episode conditions
and any single stream can be replayed in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def substream(seed: int, name: str, index: int | None = None) -> np.random.Generator:
    key = [int(seed), _name_key(name)]
    if index is not None:
        key.append(int(index))
    return np.random.default_rng(np.random.SeedSequence(key))


def substream_seed(seed: int, name: str, index: int | None = None) -> int:
    """A derived integer seed, for interfaces that take seeds rather than rngs."""
    key = [int(seed), _name_key(name)]
    if index is not None:
        key.append(int(index))
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])
