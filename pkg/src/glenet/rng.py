"""Deterministic RNG streams.

Every stochastic component takes an explicit ``numpy.random.Generator``.
Independent streams are derived from one root seed plus a tuple of stream
indices, so parallel work (folds, seeds, per-object inference) never shares
state.
"""

from __future__ import annotations

import numpy as np


def stream(root_seed: int, *indices: int) -> np.random.Generator:
    """Return a generator for stream ``indices`` under ``root_seed``.

    The same (root_seed, indices) pair always yields an identical stream;
    distinct index tuples yield statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(int(i) for i in indices))
    return np.random.Generator(np.random.PCG64(ss))
