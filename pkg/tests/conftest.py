"""Shared fixtures: tiny random volumes and slice stacks."""

from __future__ import annotations

import numpy as np
import pytest

from ctsev.preprocess import SliceStack
from ctsev.volume_io import HU_MAX, HU_MIN, Volume


@pytest.fixture
def make_volume():
    """Factory for small random volumes with in-range HU values."""

    def _make(dims=(6, 5, 4), seed=0, subject_id="case"):
        w, h, d = dims
        rng = np.random.default_rng(seed)
        hu = rng.integers(HU_MIN, HU_MAX + 1, size=(d, h, w)).astype(np.int16)
        return Volume(dims=(w, h, d), spacing=(0.7, 0.7, 1.4), hu=hu, subject_id=subject_id)

    return _make


@pytest.fixture
def make_stack():
    """Factory for random slice stacks with values in [0, 1]."""

    def _make(n=4, hw=(12, 12), seed=0, subject_id="case"):
        rng = np.random.default_rng(seed)
        return SliceStack(rng.random((n, hw[0], hw[1])), subject_id=subject_id)

    return _make
