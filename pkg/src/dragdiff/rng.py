"""Counter-based splittable random number generation.

Every random draw in the package flows through a generator produced here.
The generator is keyed by a root seed plus an integer path, so independent
streams (per record, per noise level, per run) can be derived without any
shared mutable state and without depending on evaluation order.
"""

import numpy as np

__all__ = ["generator"]


def generator(seed, *path):
    """Return a Philox generator for the stream identified by (seed, *path).

    Philox is counter-based, so draws are reproducible across platforms and
    independent of how many other streams were consumed first.  ``path`` is a
    tuple of nonnegative integers naming a node in the seed tree, e.g.
    ``generator(seed, record_index)`` for per-record augmentation streams.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
