"""Seeded random streams.

Every stream is a NumPy ``Generator`` over the Philox4x32-10 counter-based
bit generator, keyed through a ``SeedSequence`` built from the integer tuple
``(seed, purpose, *extra)``. Philox output depends only on key and counter, so
a given tuple yields the same numbers on every platform.
"""

import numpy as np

# purpose tags keep independent consumers of one seed from sharing a stream
NOISE = 1
INPUT_Z = 2
PERTURB = 3
PARAMS = 4
MASK = 5
KFOLD = 6
GMM = 7
SYNTH = 8


def stream(seed, purpose, *extra):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, purpose, *map(int, extra)])
    return np.random.Generator(np.random.Philox(ss))
