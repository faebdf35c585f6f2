"""Deterministic RNG streams keyed by integer paths.

Every stochastic component draws from a generator derived from
(master_seed, stream tag, ...indices), so results never depend on
scheduling or worker count.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Keeping them distinct guarantees e.g. population init and
# fitness evaluation never share a stream even for equal indices.
INIT_STREAM = 0
EVAL_STREAM = 1
BREED_STREAM = 2
DATA_STREAM = 3


def spawn_rng(*key: int) -> np.random.Generator:
    """Generator seeded by an integer path; all parts must be >= 0."""
    if any(k < 0 for k in key):
        raise ValueError(f"rng key parts must be non-negative, got {key}")
    return np.random.default_rng(list(key))
