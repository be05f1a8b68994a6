"""Seeded random streams.

Every random draw in the package goes through :func:`make_rng`, which wraps
numpy's Philox4x64 counter-based generator.  The key is derived from
``SeedSequence([seed, stream])`` so independent purposes (splitting, weight
init, shuffling, ...) get decorrelated streams from one user seed.
"""

import numpy as np

# stream ids; fixed so results do not depend on call order between purposes
SYNTH = 1
SPLIT = 2
INIT = 3
SHUFFLE = 4


def make_rng(seed, stream=0):
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed), int(stream)])
    return np.random.Generator(np.random.Philox(ss))
