"""Named deterministic random streams.

Every source of randomness in a run is a PCG64 generator keyed by
(seed, stream, *extra) through SeedSequence, so replaying a run with the
same seed reproduces every draw bit for bit.  Episode streams take the
episode index as an extra key, which makes episode generation a pure
function of (seed, index) independent of iteration order or batching.
"""

import numpy as np

STREAM_INIT = 0
STREAM_DROPOUT = 1
STREAM_TRAIN = 2
STREAM_EVAL = 3


def make_rng(seed, stream, *extra):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, stream) + tuple(extra))))
