"""Named seed derivation so each pipeline stage has its own reproducible stream."""
import hashlib

import numpy as np


def derive_seed(seed, *names):
    """Derive a 64-bit sub-seed from a parent seed and a sequence of names."""
    key = ":".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed, *names):
    return np.random.default_rng(derive_seed(seed, *names))
