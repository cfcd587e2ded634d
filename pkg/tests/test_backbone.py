import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from casp.backbone import (
    BackboneConfig,
    WeightError,
    anchor_centers,
    coc_aggregate,
    coc_cluster,
    coc_dispatch,
    count_low_params,
    extract_low,
    extract_pyramid,
    fold_repvgg,
    folded_block,
    get_param,
    init_high_weights,
    init_low_weights,
    repvgg_block,
)
from casp.rng import make_rng

SMALL = BackboneConfig("full", (8, 8, 16), (2, 2, 2), high_channels=16)


@pytest.fixture(scope="module")
def small_weights():
    rng = make_rng(0, "test-backbone")
    w = init_low_weights(SMALL, rng)
    w.update(init_high_weights(SMALL, rng))
    return w


def test_parameter_counts_frozen():
    # 3x3 + 1x1 kernels plus two bias vectors per block
    assert count_low_params(BackboneConfig.for_variant("full")) == 1_969_536
    assert count_low_params(BackboneConfig.for_variant("lite")) == 780_672
    weights = init_low_weights(BackboneConfig.for_variant("lite"), make_rng(0))
    assert sum(v.size for v in weights.values()) == 780_672


def test_unknown_variant():
    with pytest.raises(ValueError):
        BackboneConfig.for_variant("huge")


def test_pyramid_shapes(small_weights):
    img = make_rng(1).random((64, 96)).astype(np.float32)
    pyr = extract_pyramid(img, SMALL, small_weights)
    assert pyr[2].shape == (32, 48, 8)
    assert pyr[4].shape == (16, 24, 8)
    assert pyr[8].shape == (8, 12, 16)
    assert pyr[16].shape == (4, 6, 16)
    assert pyr[32].shape == (2, 3, 16)


def test_extract_requires_padding(small_weights):
    with pytest.raises(ValueError):
        extract_low(np.zeros((40, 64), np.float32), SMALL, small_weights)


@pytest.mark.parametrize("prefix,cin,cout,stride", [("low.s1.b0", 1, 8, 2), ("low.s1.b1", 8, 8, 1), ("low.s3.b0", 8, 16, 2)])
def test_fold_matches_three_branches(small_weights, prefix, cin, cout, stride):
    rng = make_rng(2, prefix)
    w = dict(small_weights)
    w[f"{prefix}.dense.b"] = rng.normal(0, 0.2, cout).astype(np.float32)
    w[f"{prefix}.pw.b"] = rng.normal(0, 0.2, cout).astype(np.float32)
    x = rng.normal(size=(10, 14, cin)).astype(np.float32)
    k, b = fold_repvgg(w, prefix, cin, cout, stride)
    np.testing.assert_allclose(repvgg_block(x, w, prefix, cin, cout, stride), folded_block(x, k, b, stride), atol=1e-5)


def test_missing_or_misshapen_parameter():
    with pytest.raises(WeightError):
        get_param({}, "nope")
    with pytest.raises(WeightError):
        get_param({"a": np.zeros((2, 2))}, "a", (3, 2))


@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_clusters_partition_points(n_pts, n_anc, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n_pts, 4))
    anc = rng.normal(size=(n_anc, 4))
    s, assign = coc_cluster(pts, anc)
    assert s.shape == (n_pts, n_anc)
    assert np.all((assign >= 0) & (assign < n_anc))
    assert np.bincount(assign, minlength=n_anc).sum() == n_pts
    np.testing.assert_array_equal(s[np.arange(n_pts), assign], s.max(axis=1))


def test_cluster_ties_go_to_lowest_anchor_and_zero_vectors():
    s, assign = coc_cluster(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[2.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(assign, [0, 0])
    np.testing.assert_array_equal(s[1], [0.0, 0.0])


def test_aggregate_matches_loop(rng):
    s = rng.uniform(0, 1, (12, 3))
    assign = rng.integers(0, 3, 12)
    av, pv = rng.normal(size=(3, 5)), rng.normal(size=(12, 5))
    out = coc_aggregate(s, assign, av, pv)
    for a in range(3):
        m = assign == a
        ref = (av[a] + (s[m, a][:, None] * pv[m]).sum(0)) / (1 + s[m, a].sum())
        np.testing.assert_allclose(out[a], ref)


def test_empty_cluster_keeps_anchor(rng):
    av, pv = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    out = coc_aggregate(np.ones((4, 2)), np.zeros(4, int), av, pv)
    np.testing.assert_allclose(out[1], av[1])


def test_dispatch_gates_by_similarity():
    s = np.array([[0.0, 2.0]])
    out = coc_dispatch(s, np.array([1]), np.array([[1.0], [4.0]]), scale=1.0, shift=0.0)
    np.testing.assert_allclose(out, [[4.0 / (1 + np.exp(-2.0))]])


def test_anchor_centers_ceil_mode():
    x = np.arange(9, dtype=np.float32).reshape(3, 3, 1)
    a = anchor_centers(x)[..., 0]
    np.testing.assert_allclose(a, [[2.0, 3.5], [6.5, 8.0]])
