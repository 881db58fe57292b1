"""Deterministic seed derivation.

A single master seed drives every random choice in a run. Each consumer
derives its own stream by hashing the master seed together with a role
tag path, e.g. ``derive_seed(master, "select", round_no)``. Two runs with
the same master seed therefore replay bit-identically, while distinct
roles (client selection, negative sampling, splitting, ...) never share
a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *tags) -> int:
    """Hash (master, *tags) into a 63-bit seed."""
    text = ":".join([str(int(master))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(master: int, *tags) -> np.random.Generator:
    """Fresh generator for the stream named by the tag path."""
    return np.random.default_rng(derive_seed(master, *tags))
