"""Deterministic fan-out of one experiment seed into per-component RNG streams.

Every stochastic component (split shuffling, the balanced sampler, parameter
init, augmentation draws, phantom geometry) gets its own generator derived
from the single experiment seed plus a tag path, so components can be
reordered or parallelised without perturbing each other's streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_word(tag: object) -> int:
    # repr() keeps str and int tags from colliding ('A' vs 1) and is stable
    # across interpreter runs, unlike hash().
    digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *tags: object) -> np.random.Generator:
    """Child generator for (seed, *tags); same arguments, same stream."""
    words = [int(seed) & _MASK64] + [_tag_word(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(words))
