"""Derivation of per-component seeds from a single master seed."""
import hashlib

import numpy as np


def derive_seed(master: int, *names) -> int:
    """Mix component names into ``master``; returns a 32-bit seed.

    ``derive_seed(7, "forest", 3)`` is stable across processes and Python
    versions (no reliance on ``hash()``).
    """
    key = ":".join([str(int(master))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little")


def rng_for(master: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))
