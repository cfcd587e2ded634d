import numpy as np

from casp.rng import make_rng


def test_same_seed_and_tags_repeat():
    a = make_rng(5, "scene", 3).normal(size=10)
    b = make_rng(5, "scene", 3).normal(size=10)
    np.testing.assert_array_equal(a, b)


def test_tags_and_seeds_separate_streams():
    base = make_rng(5, "scene").random(8)
    assert not np.array_equal(base, make_rng(5, "weights").random(8))
    assert not np.array_equal(base, make_rng(6, "scene").random(8))
    assert not np.array_equal(make_rng(0, 1, 2).random(4), make_rng(0, 2, 1).random(4))


def test_uses_philox():
    assert isinstance(make_rng(0).bit_generator, np.random.Philox)
