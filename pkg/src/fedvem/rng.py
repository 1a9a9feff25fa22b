"""Deterministic random stream derivation.

Every stochastic component draws from a generator keyed by a structured
integer path (experiment seed plus purpose tags).  Streams derived from the
same path are identical regardless of which worker or in which order they
are consumed, which makes federated rounds reproducible and independent of
the worker count.
"""

from __future__ import annotations

import numpy as np

# Purpose tags; keep stable, they are part of the reproducibility contract.
TAG_INIT = 1          # parameter initialization
TAG_PARTITION = 2     # data partitioning
TAG_CLIENT = 3        # per-(round, client) local training
TAG_REPORTERS = 4     # per-round reporter selection
TAG_SYNTH = 5         # synthetic dataset generation
TAG_BASELINE = 6      # baseline local training


def stream(*path: int) -> np.random.Generator:
    """Return a generator uniquely keyed by the integer path."""
    return np.random.default_rng(list(path))
