"""Seed derivation: one root seed fans out into independent named streams."""

import zlib

import numpy as np


def derive_rng(root_seed, purpose):
    """Counter-based (Philox) generator keyed by the root seed and a purpose tag."""
    ss = np.random.SeedSequence([int(root_seed), zlib.crc32(purpose.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(ss))
