"""Deterministic seed derivation for independent, counter-keyed RNG streams.

Every random draw in the package comes from a generator keyed by a master
seed plus a path of component names and counters, e.g.
``rng_for(seed, "views", block_id, epoch, step)``.  Streams are independent
of scheduling order, which is what makes resumed runs and per-block
retraining bit-exact.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "rng_for"]


def derive_seed(*parts: int | str) -> int:
    """Hash a (master_seed, component, index, ...) path into a 63-bit seed."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, (int, np.integer)):
            h.update(b"i")
            h.update(int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            h.update(b"s")
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        else:
            raise TypeError(f"seed path parts must be int or str, got {type(part)!r}")
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rng_for(*parts: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
