"""
Keyed random streams
Every consumer derives its own generator from an integer key so results never depend on call order
"""
import numpy as np

from .error_reporter import ParameterError

# Stream tags keep keys from different consumers disjoint
STREAM_INIT = 1
STREAM_VIEWS = 2
STREAM_BATCHES = 3
STREAM_DATA = 4
STREAM_PROBE = 5


def derive_rng(*key: int) -> np.random.Generator:
    """
    Generator over Philox (counter-based, 64-bit words) seeded from a key tuple

    Usage:
        rng = derive_rng(seed, STREAM_VIEWS, step, sample_id)
    """
    if any(int(k) < 0 for k in key):
        raise ParameterError(f"rng key parts must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))
