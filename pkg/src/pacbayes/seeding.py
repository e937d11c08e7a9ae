"""Named RNG streams fanned out from a single root seed.

Every source of randomness in a run (weight init, data shuffling, posterior
noise, prior sampling, certification draws) pulls from its own stream so that
adding draws to one consumer never perturbs another.
"""
from __future__ import annotations

import numpy as np

# Stream ids are part of the on-disk reproducibility contract; never renumber.
STREAMS = {
    "init": 0,
    "data": 1,
    "posterior-noise": 2,
    "prior-samples": 3,
    "certify": 4,
    "baseline": 5,
    "heldout-data": 6,
    "test-data": 7,
}


def stream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return the generator for a named stream, optionally sub-indexed.

    Sub-indices give per-query or per-cell streams that are independent of
    how many draws earlier consumers made.
    """
    if name not in STREAMS:
        raise KeyError(f"unknown RNG stream {name!r}")
    entropy = (int(root_seed), STREAMS[name], *(int(i) for i in indices))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
