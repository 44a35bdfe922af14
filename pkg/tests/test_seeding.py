"""Deterministic, tag-separated RNG derivation."""

import numpy as np

from ctsev.seeding import derive_rng


def test_same_seed_and_tags_reproduce_the_stream():
    a = derive_rng(42, "sampler", 3).random(16)
    b = derive_rng(42, "sampler", 3).random(16)
    assert np.array_equal(a, b)


def test_different_tags_give_different_streams():
    a = derive_rng(0, "split", 0).random(8)
    b = derive_rng(0, "split", 1).random(8)
    c = derive_rng(0, "init", 0).random(8)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(b, c)


def test_different_seeds_give_different_streams():
    assert derive_rng(1, "x").random() != derive_rng(2, "x").random()


def test_tag_types_are_distinguished():
    """The string 'A' must not collide with other spellings of the tag."""
    vals = {
        derive_rng(5, "A").random(),
        derive_rng(5, 1).random(),
        derive_rng(5, "1").random(),
        derive_rng(5, ("A",)).random(),
    }
    assert len(vals) == 4


def test_tag_order_matters():
    assert derive_rng(9, "a", "b").random() != derive_rng(9, "b", "a").random()


def test_frozen_anchor_values():
    # pinned so a refactor of the derivation cannot silently reshuffle
    # every split / init / sampler stream in the trained bundles
    assert derive_rng(0, "split", 3).random() == 0.42904872572780994
    assert derive_rng(123, "init", 0, "A").random() == 0.5535070015702376
    assert int(derive_rng(7).integers(0, 1_000_000)) == 944904


def test_huge_seed_is_accepted():
    r = derive_rng(2**80 + 17, "x")
    assert 0.0 <= r.random() < 1.0
