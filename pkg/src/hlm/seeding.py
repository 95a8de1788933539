"""Deterministic RNG derivation.

All randomness in the pipeline flows from one user-supplied root seed.
Independent streams are derived from (root_seed, purpose tag, indices) so
that adding a consumer never perturbs the draws of another.
"""

import zlib

import numpy as np


def _tag_word(tag):
    # crc32 is stable across platforms and Python versions
    return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF


def seed_sequence(root_seed, tag, *indices):
    """SeedSequence for a named purpose, e.g. seed_sequence(7, "noise", step)."""
    if root_seed < 0:
        raise ValueError(f"root seed must be non-negative, got {root_seed}")
    entropy = [int(root_seed), _tag_word(tag)] + [int(i) for i in indices]
    return np.random.SeedSequence(entropy)


def derive_rng(root_seed, tag, *indices):
    """A PCG64 Generator on an isolated, reproducible stream."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root_seed, tag, *indices)))
