"""Master-seed splitting.

A run has one 64-bit master seed. Every component that draws random numbers
gets its own seed from ``derive_seed(master, *path)``, where ``path`` is a
tuple of component labels (strings or non-negative ints), for example
``derive_seed(master, "stage2", "edge", 0, "round", 3)``.

The rule is fixed and must not change between versions: the master seed and
each label are serialized as ``"<type>:<value>"`` joined by ``"/"``, hashed
with BLAKE2b (8-byte digest), and the digest is read as a big-endian
unsigned integer. Disabling one component therefore never shifts the random
stream of another.
"""
import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def _token(x):
    if isinstance(x, bool):
        raise TypeError("seed path labels must be str or int, not bool")
    if isinstance(x, (int, np.integer)):
        if x < 0:
            raise ValueError("integer seed labels must be non-negative")
        return f"i:{int(x)}"
    if isinstance(x, str):
        return f"s:{x}"
    raise TypeError(f"unsupported seed label {x!r}")


def derive_seed(master, *path):
    """Return the 64-bit seed for component ``path`` under ``master``."""
    master = int(master) & MASK64
    text = "/".join([f"m:{master}"] + [_token(p) for p in path])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def rng(master, *path):
    """numpy Generator seeded from ``derive_seed(master, *path)``."""
    return np.random.default_rng(derive_seed(master, *path))
