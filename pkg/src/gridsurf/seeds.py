"""Deterministic RNG substreams.

Every stochastic choice in the pipeline draws from a Generator keyed by
(seed, stream tag, iteration indices) through SeedSequence, so results
never depend on call order, thread count, or how many draws another
subsystem made.
"""

from __future__ import annotations

import numpy as np

# stream tags (stable; changing one changes every derived stream)
RAYS = 1
STRATIFY = 2
IMPORTANCE = 3
SMOOTH = 4
DEPTH_NOISE = 5
POSE_PERTURB = 6
SPHERE_INIT = 7
EVAL_SAMPLES = 8
NET_INIT = 9
GRID_INIT = 10
DROPOUT = 11
GRADCHECK = 12


def substream(seed, tag, *indices):
    """A fresh Generator for one (seed, tag, indices...) address."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(tag)) + tuple(int(i) for i in indices)))
