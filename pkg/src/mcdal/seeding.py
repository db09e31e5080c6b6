"""Deterministic RNG derivation.

Every random draw in the package flows from an explicit seed plus a chain of
context tags (purpose, iteration, split, image id, ...), so any sub-computation
can be reproduced in isolation and runs are resumable at round boundaries
without carrying generator state around.
"""

import hashlib

import numpy as np


def seed_material(*parts) -> list[int]:
    """Map a mixed tuple of ints/strings to SeedSequence entropy words.

    Strings are hashed with sha256 (Python's hash() is salted per process and
    must not be used here).
    """
    words: list[int] = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            words.append(int(part) & 0xFFFFFFFFFFFFFFFF)
        elif isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:8], "little"))
            words.append(int.from_bytes(digest[8:16], "little"))
        else:
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
    return words


def derive_rng(*parts) -> np.random.Generator:
    """Create a Generator deterministically from (seed, *context tags)."""
    if not parts:
        raise ValueError("at least one seed part is required")
    return np.random.default_rng(np.random.SeedSequence(seed_material(*parts)))
