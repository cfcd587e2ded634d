import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from casp.cascade import (
    DataError,
    MatchSet,
    ScaleMap,
    ScoreMatrix,
    cascade_match,
    dual_softmax,
    init_rsca_weights,
    inject_ground_truth,
    match_one_to_one,
    merge_cells,
    mnn_dense,
    partial_confidence_dense,
    partial_softmax,
    rsca_attention,
    rsca_block,
    select_priors,
    split_cells,
)
from casp.rng import make_rng
from casp.tensor import OpCounter, linear, multihead_attention, row_softmax

# --- scale map ----------------------------------------------------------------


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3))
def test_children_partition_fine_grid(h16, w16, r):
    phi = ScaleMap(h16, w16, r)
    kids = phi.children(np.arange(phi.n16))
    assert kids.shape == (phi.n16, r * r)
    np.testing.assert_array_equal(np.sort(kids.ravel()), np.arange(phi.n8))
    np.testing.assert_array_equal(phi.parent(kids), np.repeat(np.arange(phi.n16), r * r).reshape(phi.n16, r * r))
    np.testing.assert_array_equal(phi.slot(kids), np.tile(np.arange(r * r), (phi.n16, 1)))


def test_for_fine_grid():
    assert ScaleMap.for_fine_grid(8, 6) == ScaleMap(4, 3)
    with pytest.raises(ValueError):
        ScaleMap.for_fine_grid(7, 6)


# --- priors and dual softmax ----------------------------------------------------


def test_diagonal_priors_k1():
    s = np.eye(5) * 10 + make_rng(0).normal(size=(5, 5))
    pa, pb = select_priors(s, 1)
    np.testing.assert_array_equal(pa[:, 0], np.arange(5))
    np.testing.assert_array_equal(pb[:, 0], np.arange(5))


def test_priors_k_too_large():
    with pytest.raises(ValueError):
        select_priors(np.zeros((3, 10)), 4)


@given(st.integers(0, 2**31 - 1))
def test_priors_invariant_under_row_softmax(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(0, 2, (9, 13))
    pa, pb = select_priors(s, 4)
    np.testing.assert_array_equal(pa, select_priors(row_softmax(s), 4)[0])
    np.testing.assert_array_equal(pb, select_priors(row_softmax(s.T).T, 4)[1])


def test_score_matrix_lazy_equals_dense(rng):
    fa, fb = rng.normal(size=(6, 8)), rng.normal(size=(5, 8))
    s = ScoreMatrix(fa, fb, temperature=0.5)
    dense = fa.astype(np.float32) @ fb.astype(np.float32).T / (0.5 * np.sqrt(8))
    np.testing.assert_allclose(s.full(), dense, rtol=1e-5)
    np.testing.assert_allclose(s.T.full(), dense.T, rtol=1e-5)
    q, c = np.array([[0, 2]]), np.array([[1, 3, 4]])
    np.testing.assert_allclose(s.blocks(q, c)[0], dense[np.ix_([0, 2], [1, 3, 4])], rtol=1e-5)


def test_dual_softmax_examples(rng):
    np.testing.assert_allclose(dual_softmax(np.array([[3.7]])), [[1.0]])
    s = rng.normal(size=(6, 6))
    off = rng.uniform(-1, 0, (6, 6))
    np.fill_diagonal(off, 10.0)  # every diagonal entry leads its row and column by >= 10
    p = dual_softmax(off)
    assert np.all(np.abs(np.diag(p) - 1) < 1e-3)
    sym = s + s.T
    np.testing.assert_allclose(dual_softmax(sym), dual_softmax(sym).T, atol=1e-15)
    assert np.all((dual_softmax(s) >= 0) & (dual_softmax(s) <= 1))


# --- ground-truth injection ---------------------------------------------------------


def test_inject_keeps_priors_when_gt_already_inside(rng):
    p = rng.random((6, 10))
    pa, pb = select_priors(p, 4)
    gt = [(i, int(pa[i, 0])) for i in range(6)]
    ia, _ = inject_ground_truth(p, gt, 4)
    np.testing.assert_array_equal(ia, pa)


def test_inject_disjoint_gt_fills_with_best_predictions():
    p = np.arange(16, dtype=float)[None, :].repeat(16, 0)  # best predictions: 15, 14, ...
    gt = [(0, 0), (0, 1), (0, 2), (0, 3)]
    ia, _ = inject_ground_truth(p, gt, 8)
    assert set(ia[0]) == {0, 1, 2, 3, 15, 14, 13, 12}
    np.testing.assert_array_equal(ia[1], np.arange(15, 7, -1))


def test_inject_empty_gt_equals_select(rng):
    p = rng.random((5, 7))
    ia, ib = inject_ground_truth(p, np.zeros((0, 2), int), 4)
    pa, pb = select_priors(p, 4)
    np.testing.assert_array_equal(ia, pa)
    np.testing.assert_array_equal(ib, pb)


def test_inject_out_of_range():
    with pytest.raises(DataError):
        inject_ground_truth(np.zeros((3, 4)), [(0, 4)], 2)


# --- cells and RSCA -----------------------------------------------------------------


@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(1, 6))
def test_merge_split_round_trip(r, hc, wc, c):
    x = np.random.default_rng(hc * 31 + wc).normal(size=(r * hc, r * wc, c)).astype(np.float32)
    cells = split_cells(x, r)
    assert cells.shape == (hc * wc, r * r, c)
    assert np.array_equal(merge_cells(cells, r * hc, r * wc, r), x)


def test_split_cells_layout():
    x = np.arange(16).reshape(4, 4, 1)
    np.testing.assert_array_equal(split_cells(x, 2)[1, :, 0], [2, 3, 6, 7])


def test_rsca_with_all_priors_equals_full_cross_attention():
    c, r = 16, 2
    rng = make_rng(0, "rsca")
    fa = rng.normal(size=(4, 6, c)).astype(np.float32)
    fb = rng.normal(size=(6, 4, c)).astype(np.float32)
    w = init_rsca_weights(1, c, rng)
    n16a, n16b = 2 * 3, 3 * 2
    prior_a = np.tile(np.arange(n16b), (n16a, 1))
    msg = rsca_attention(fa, fb, prior_a, w, "rsca.b0", r, heads=4)
    q = linear(fa, w["rsca.b0.q"]).reshape(-1, c)
    k = linear(fb, w["rsca.b0.k"]).reshape(-1, c)
    v = linear(fb, w["rsca.b0.v"]).reshape(-1, c)
    ref = linear(multihead_attention(q, k, v, 4), w["rsca.b0.o"], w["rsca.b0.ob"]).reshape(4, 6, c)
    np.testing.assert_allclose(msg, ref, atol=1e-5)


def test_rsca_block_pads_odd_maps_and_is_symmetric():
    c = 8
    rng = make_rng(1, "rsca")
    fa = rng.normal(size=(3, 5, c)).astype(np.float32)
    fb = rng.normal(size=(5, 3, c)).astype(np.float32)
    w = init_rsca_weights(1, c, rng)
    pa = np.tile(np.arange(6), (6, 1))[:, :4]
    pb = np.tile(np.arange(6), (6, 1))[:, 2:]
    na, nb = rsca_block(fa, fb, pa, pb, w, "rsca.b0", heads=2)
    assert na.shape == fa.shape and nb.shape == fb.shape
    sb, sa = rsca_block(fb, fa, pb, pa, w, "rsca.b0", heads=2)
    assert np.array_equal(na, sa) and np.array_equal(nb, sb)


# --- partial softmax ---------------------------------------------------------------------


def test_partial_softmax_examples(rng):
    x = rng.normal(size=10)
    np.testing.assert_allclose(partial_softmax(x, np.arange(10)), row_softmax(x[None])[0], atol=1e-15)
    p = partial_softmax(x, [4])
    assert p[4] == 1.0 and np.count_nonzero(p) == 1
    with pytest.raises(ValueError):
        partial_softmax(x, [])


@given(st.integers(0, 2**31 - 1))
def test_partial_softmax_vs_masked_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 5, 64)
    support = rng.choice(64, 32, replace=False)
    p = partial_softmax(x, support)
    mask = np.zeros(64, bool)
    mask[support] = True
    e = np.where(mask, np.exp(x - x[mask].max()), 0.0)
    np.testing.assert_allclose(p, e / e.sum(), atol=1e-6)
    assert np.all(p[~mask] == 0)
    assert abs(p[mask].sum() - 1) <= 1e-6


def test_partial_softmax_large_scores_stable():
    p = partial_softmax(np.array([1000.0, 999.0, -5.0]), [0, 1])
    assert np.all(np.isfinite(p))


# --- one-to-one matching ---------------------------------------------------------------


def _phi_support(phi_a, phi_b, prior_a, prior_b):
    allowed = np.zeros((phi_a.n8, phi_b.n8), bool)
    for i in range(phi_a.n8):
        for j in range(phi_b.n8):
            allowed[i, j] = (j in phi_b.children(prior_a[phi_a.parent(i)])) and (
                i in phi_a.children(prior_b[phi_b.parent(j)])
            )
    return allowed


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.6))
def test_emitted_pairs_respect_support(seed, theta):
    rng = np.random.default_rng(seed)
    phi_a, phi_b = ScaleMap(2, 3), ScaleMap(3, 2)
    s8 = rng.normal(0, 3, (phi_a.n8, phi_b.n8))
    pa = np.stack([rng.choice(6, 4, replace=False) for _ in range(6)])
    pb = np.stack([rng.choice(6, 4, replace=False) for _ in range(6)])
    m = match_one_to_one(s8, pa, pb, phi_a, phi_b, theta)
    allowed = _phi_support(phi_a, phi_b, pa, pb)
    assert all(allowed[i, j] for i, j in m.pairs())
    assert len(set(m.ia.tolist())) == len(m) and len(set(m.ib.tolist())) == len(m)
    assert np.all(m.conf >= theta)
    # same result as a dense MNN over the partial-softmax product
    dense = partial_confidence_dense(s8, pa, pb, phi_a, phi_b)
    assert np.all(dense[~allowed] == 0)
    assert m.pairs() == mnn_dense(dense, theta).pairs()


def test_diagonal_scores_match_global_oracle():
    phi = ScaleMap(3, 3)
    rng = make_rng(0, "diag")
    s8 = rng.normal(size=(phi.n8, phi.n8)) + 8 * np.eye(phi.n8)
    s16 = np.eye(phi.n16) * 5 + rng.normal(0, 0.1, (phi.n16, phi.n16))
    pa, pb = select_priors(s16, 4)
    m = match_one_to_one(s8, pa, pb, phi, phi, 0.2)
    assert m.pairs() == {(i, i) for i in range(phi.n8)}
    assert m.pairs() == mnn_dense(dual_softmax(s8), 0.2).pairs()


def test_threshold_above_one_is_empty(rng):
    phi = ScaleMap(2, 2)
    s8 = rng.normal(size=(16, 16)) + 20 * np.eye(16)
    p = np.tile(np.arange(4), (4, 1))
    assert len(match_one_to_one(s8, p, p, phi, phi, 1.1)) == 0


def test_cascade_counts_fewer_ops_than_dense():
    rng = make_rng(2, "ops")
    f16a, f16b = rng.normal(size=(8, 8, 16)), rng.normal(size=(8, 8, 16))
    f8a, f8b = rng.normal(size=(16, 16, 16)), rng.normal(size=(16, 16, 16))
    c = OpCounter()
    cascade_match(f16a, f16b, f8a, f8b, 8, 0.2, c)
    assert c.counts["mac"] < 256 * 256 * 16


def test_match_set_json():
    m = MatchSet(np.array([5, 1]), np.array([2, 7]), np.array([0.5, 0.9], np.float32)).sorted()
    assert m.ia.tolist() == [1, 5]
    d = json.loads(m.to_json((4, 4), (4, 4), [(32, 32), (32, 32)]))
    assert d["scale"] == 8
    assert d["matches"][0] == {"iA": [8.0, 0.0], "iB": [24.0, 8.0], "conf": pytest.approx(0.9)}
    assert len(MatchSet.empty()) == 0
