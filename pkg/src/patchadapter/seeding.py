"""Named RNG streams derived from a single run seed.

Every source of randomness in a run (splitting, parameter init, shuffling,
dropout) draws from its own stream so the streams stay independent while the
whole run remains reproducible from one seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """Stable 32-bit child seed for the named stream of a run seed."""
    mix = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(mix.generate_state(1)[0])


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream of a run seed."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    )
