"""Deterministic per-run random substreams.

Every random draw in the package comes from a generator built by
:func:`substream`.  The derivation is

    SeedSequence(entropy=master_seed, spawn_key=(run_id, *tags)) -> Philox

Philox is a counter-based generator, so the stream for a given
``(master_seed, run_id, tags)`` triple does not depend on how runs are
distributed across workers or in which order they execute.  Tags keep the
driver path, the stationary companion and the SPDE noise of one run in
disjoint streams.
"""
from __future__ import annotations

import numpy as np

# stream tags
DRIVER = 0
NOISE = 1
AUX = 2


def substream(master_seed: int, run_id: int, *tags: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(run_id),) + tuple(int(t) for t in tags))
    return np.random.Generator(np.random.Philox(ss))
