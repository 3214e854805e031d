"""Deterministic seed derivation.

All randomness in the package flows from numpy Generators whose seeds are
derived here. Derivation is hash-based (not Python's salted ``hash``) so
that runs reproduce bit-exactly across processes and platforms.
"""

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Mix arbitrary labelled parts into a 64-bit seed."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
