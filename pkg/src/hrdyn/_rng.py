"""Seed derivation tree.

Every random stream in hrdyn is derived from one root seed and a path of
labels, written ``root:module:purpose:index``.  The path is hashed with
SHA-256 so derivation is stable across processes and Python versions
(the builtin ``hash`` is salted per process).
"""

import hashlib

import numpy as np


def derive_seed(root, *path):
    """Return a 64-bit seed for ``root`` and the label ``path``."""
    key = ":".join([str(int(root))] + [str(p) for p in path])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(root, *path):
    return np.random.default_rng(derive_seed(root, *path))
