"""Deterministic, purpose-keyed random streams.

Every stochastic choice in the toolkit draws from a generator derived from a
base seed plus a tuple of string/int tokens naming the purpose ("mask",
sample id, epoch, ...). Derivation goes through a cryptographic hash, so
streams for different purposes are independent and stable across runs,
platforms, and code reorderings (unlike Python's salted hash()).
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, *tokens: object) -> int:
    """Mix a base seed and purpose tokens into a stable 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for tok in tokens:
        h.update(b"\x1f")
        h.update(str(tok).encode())
    return int.from_bytes(h.digest(), "little")


def derive_rng(base: int, *tokens: object) -> np.random.Generator:
    """Generator seeded from derive_seed(base, *tokens)."""
    return np.random.Generator(np.random.PCG64(derive_seed(base, *tokens)))
