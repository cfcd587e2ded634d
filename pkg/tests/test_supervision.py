import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from casp.evalharness.scenes import make_truth
from casp.rng import make_rng
from casp.supervision import (
    EmptyGroundTruth,
    SceneTruth,
    build_gt,
    coarse_loss,
    coarse_loss_grad,
    fine_losses,
    pool_pairs,
    total_loss,
)


def dual64(S):
    R = np.exp(S - S.max(1, keepdims=True))
    R /= R.sum(1, keepdims=True)
    C = np.exp(S - S.max(0, keepdims=True))
    C /= C.sum(0, keepdims=True)
    return R * C


def test_identity_scene_is_diagonal():
    gt = build_gt(SceneTruth("homography", (64, 96), (64, 96), H=np.eye(3)))
    assert gt.grid_a == (8, 12)
    np.testing.assert_array_equal(gt.pairs8, np.stack([np.arange(96)] * 2, 1))
    assert len(gt.pairs16) == 24 and (gt.pairs16[:, 0] == gt.pairs16[:, 1]).all()
    np.testing.assert_allclose(gt.fine_b[13], [8.0, 8.0])


def test_translation_scene_shifts_tokens():
    H = np.array([[1, 0, 8.0], [0, 1, 0], [0, 0, 1]])
    gt = build_gt(SceneTruth("homography", (32, 32), (32, 32), H=H))
    # 4x4 grid: column x of A lands on column x + 1 of B; the last column leaves the image
    assert len(gt) == 12
    assert all(j == i + 1 for i, j in gt.pairs8)


def test_gt_is_one_to_one_for_every_family():
    for fam in ("rotation+scale", "homography", "posed-depth"):
        truth = make_truth(fam, (128, 128), make_rng(5, fam))
        gt = build_gt(truth)
        assert len(gt) > 0
        assert len(set(gt.pairs8[:, 0])) == len(gt) == len(set(gt.pairs8[:, 1]))


def test_depth_mode_matches_projection():
    truth = make_truth("posed-depth", (128, 160), make_rng(1, "pd"))
    gt = build_gt(truth)
    pts = np.stack([gt.pairs8[:, 0] % 20, gt.pairs8[:, 0] // 20], 1) * 8.0
    z = truth.depth_a[pts[:, 1].astype(int), pts[:, 0].astype(int)].astype(np.float64)
    X = np.hstack([pts, np.ones((len(pts), 1))]) @ np.linalg.inv(truth.K_a).T * z[:, None]
    Xb = X @ truth.R.T + truth.t
    proj = Xb @ truth.K_b.T
    np.testing.assert_allclose(gt.fine_b, proj[:, :2] / proj[:, 2:], rtol=1e-9)


def test_scene_truth_roundtrip(tmp_path):
    for fam in ("homography", "posed-depth"):
        truth = make_truth(fam, (64, 64), make_rng(2, fam))
        truth.save(tmp_path / f"{fam}.json")
        back = SceneTruth.load(tmp_path / f"{fam}.json")
        assert back.mode == truth.mode and back.size_a == truth.size_a
        for name in ("H", "K_a", "R", "t", "depth_a", "depth_b"):
            a, b = getattr(truth, name), getattr(back, name)
            assert (a is None) == (b is None)
            if a is not None:
                np.testing.assert_array_equal(a, b)


def test_scene_truth_validation():
    with pytest.raises(ValueError):
        SceneTruth("homography", (8, 8), (8, 8))
    with pytest.raises(ValueError):
        SceneTruth("homography", (8, 8), (8, 8), H=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        SceneTruth("posed-depth", (8, 8), (8, 8), H=np.eye(3))
    with pytest.raises(ValueError):
        SceneTruth("affine", (8, 8), (8, 8))


def test_pool_pairs():
    # 4x4 grids at 1/8 -> 2x2 at 1/16
    pairs = np.array([[0, 0], [1, 5], [5, 1], [15, 10]])
    np.testing.assert_array_equal(pool_pairs(pairs, (4, 4), (4, 4)), [[0, 0], [3, 3]])
    assert pool_pairs(np.zeros((0, 2)), (4, 4), (4, 4)).shape == (0, 2)


def test_coarse_loss_values():
    P = np.array([[0.5, 0.1], [0.2, 0.25]])
    assert coarse_loss(P, [[0, 0], [1, 1]]) == pytest.approx(-(np.log(0.5) + np.log(0.25)) / 2)
    assert coarse_loss(np.eye(3), [[0, 0]]) == pytest.approx(0.0, abs=1e-11)
    with pytest.raises(EmptyGroundTruth):
        coarse_loss(P, np.zeros((0, 2)))


@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(2, 6))
def test_coarse_loss_grad_matches_finite_differences(seed, na, nb):
    rng = np.random.default_rng(seed)
    S = rng.normal(0, 2, (na, nb))
    m = min(na, nb)
    gt = np.stack([rng.permutation(na)[:m], rng.permutation(nb)[:m]], 1)
    g = coarse_loss_grad(S, gt)
    h = 1e-6
    fd = np.zeros_like(S)
    for idx in np.ndindex(S.shape):
        d = np.zeros_like(S)
        d[idx] = h
        fd[idx] = (coarse_loss(dual64(S + d), gt) - coarse_loss(dual64(S - d), gt)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_fine_losses():
    corr = np.zeros((2, 5, 5))
    corr[0, 2, 3] = 1.0  # peak at offset (+1, 0)
    centers = np.array([[10.0, 10.0], [0.0, 0.0]])
    gt = np.array([[11.0, 10.0], [50.0, 50.0]])  # second one is outside its window
    pos = np.array([[11.5, 10.0], [0.0, 0.0]])
    lf, lsub, used = fine_losses(corr, pos, centers, gt, temperature=0.1)
    logits = corr[0].ravel() / 0.1
    expect = -(logits[13] - np.log(np.exp(logits).sum()))
    assert used == 1
    assert lf == pytest.approx(expect)
    assert lsub == pytest.approx(0.25)
    assert fine_losses(corr[1:], pos[1:], centers[1:], gt[1:]) == (0.0, 0.0, 0)


def test_total_loss_weights():
    rep = total_loss(1.0, 2.0, 3.0, 4.0, (0.5, 0.5, 0.25, 1.0))
    assert rep.total == pytest.approx(0.5 + 1.0 + 0.75 + 4.0)
    assert rep.as_dict()["lambdas"] == [0.5, 0.5, 0.25, 1.0]
    assert total_loss(1, 1, 1, 1, (0, 0, 0, 0)).total == 0


@given(st.integers(0, 2**31 - 1))
def test_coarse_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(7, 5))
    gt = np.array([[0, 1], [3, 4], [6, 0]])
    pr, pc = rng.permutation(7), rng.permutation(5)
    inv_r, inv_c = np.argsort(pr), np.argsort(pc)
    moved = np.stack([inv_r[gt[:, 0]], inv_c[gt[:, 1]]], 1)
    assert coarse_loss(dual64(S[pr][:, pc]), moved) == pytest.approx(coarse_loss(dual64(S), gt), rel=1e-12)
