"""
rccformer.core.rng - The single seedable random source

Every initialisation, shuffle, crop and synthetic scene draws from a numpy
``Generator`` backed by PCG64 (permuted congruential generator, 128-bit state,
XSL-RR output). A run is fully determined by one unsigned 64-bit seed; child
streams are derived with ``SeedSequence`` spawn keys so that adding a consumer
never shifts the draws of another.
"""

import numpy as np

MAX_SEED = 2**64 - 1


def make_rng(seed: int) -> np.random.Generator:
    """Create the PCG64-backed generator for ``seed``."""
    if not 0 <= int(seed) <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent child seed from ``seed`` and integer ``keys``."""
    spawn_key = tuple(int(k) for k in keys)
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the child stream ``keys`` of ``seed``."""
    return make_rng(derive_seed(seed, *keys))
