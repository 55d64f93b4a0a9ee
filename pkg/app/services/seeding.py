import hashlib

import numpy as np


def derive_seed(root, *parts):
    """
    Derives an independent 64-bit seed from a root seed and a path of keys,
    e.g. derive_seed(seed, "client", "c3"). Depends only on its arguments,
    so serial and parallel schedules consume identical streams.
    """
    key = "/".join([str(int(root))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def make_rng(seed):
    """Returns a numpy Generator; an existing Generator is passed through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
