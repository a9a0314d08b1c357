"""Seeded random streams.

Every stochastic choice in the package draws from a Philox4x32-10 generator
whose 128-bit key is the BLAKE2b digest of ``seed`` joined with a stream path.
Philox is counter based, so a stream depends only on its key: sample ``i``
of a dataset can be regenerated without touching samples ``0..i-1``.
"""

from __future__ import annotations

import hashlib

import numpy as np

PRNG_NAME = "philox4x32-10/blake2b-key"


def stream_key(seed: int, *path: object) -> int:
    text = "/".join([str(int(seed))] + [str(p) for p in path])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *path: object) -> np.random.Generator:
    """Return an independent generator for ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))
