import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from casp.cascade import MatchSet
from casp.refine import (
    _refine_batch,
    extract_patches,
    fuse_level,
    fuse_pyramid,
    init_fpn_weights,
    patch_correlation,
    pixel_refine,
    refine_matches,
    subpixel_refine,
    upsample_patch,
)
from casp.rng import make_rng


def field(c=32, seed=0, lo=6.0, hi=16.0):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(lo, hi, c)
    ang = rng.uniform(0, 2 * np.pi, c)
    om = np.stack([np.cos(ang), np.sin(ang)], 1) * (2 * np.pi / lam)[:, None]
    ph = rng.uniform(0, 2 * np.pi, c)
    return lambda pts: np.cos(pts @ om.T + ph).astype(np.float32)


def half_map(f, h, w, shift=(0.0, 0.0)):
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel() * 2.0 - shift[0], ys.ravel() * 2.0 - shift[1]], 1)
    return f(pts).reshape(h, w, -1)


def test_extract_patches_zero_outside():
    m = np.arange(1, 17, dtype=np.float32).reshape(4, 4, 1)
    p = extract_patches(m, np.array([[0, 0], [2, 1]]), 3)
    np.testing.assert_array_equal(p[0, :, :, 0], [[0, 0, 0], [0, 1, 2], [0, 5, 6]])
    np.testing.assert_array_equal(p[1, :, :, 0], [[2, 3, 4], [6, 7, 8], [10, 11, 12]])
    with pytest.raises(ValueError):
        extract_patches(m, np.zeros((1, 2)), 4)


def test_upsample_patch_interpolates_and_blanks():
    p = np.zeros((3, 3, 1), np.float32)
    p[:, :2, 0] = [[2, 4], [6, 8], [10, 12]]
    up = upsample_patch(p)[..., 0]
    assert up.shape == (5, 5)
    np.testing.assert_allclose(up[0, :3], [2, 3, 4])
    np.testing.assert_allclose(up[1, :3], [4, 5, 6])
    # the third column is padding: nothing interpolated from it survives
    assert not up[:, 3:].any()
    p[0, 0, 0] = 0.0  # a genuine zero descriptor also counts as blank
    assert upsample_patch(p)[1, 1, 0] == 0.0


def test_pixel_refine_identity_and_flat():
    f = field()
    m = half_map(f, 16, 16)
    pa = extract_patches(m, np.array([[8, 8]]))[0]
    off, corr = pixel_refine(pa, pa)
    np.testing.assert_array_equal(off, [0, 0])
    assert corr.shape == (9, 9) and corr[4, 4] == pytest.approx(1.0)
    off, _ = pixel_refine(pa, np.zeros_like(pa))
    np.testing.assert_array_equal(off, [0, 0])


def test_patch_correlation_is_cosine():
    g = np.array([[[3.0, 4.0], [0.0, 0.0]]])
    np.testing.assert_allclose(patch_correlation(np.array([6.0, 8.0]), g), [[1.0, 0.0]])


@pytest.mark.parametrize("shift", [(2.0, 0.0), (-2.0, 4.0), (0.0, -2.0)])
def test_even_translation_recovered_exactly(shift):
    f = field(seed=1)
    a = half_map(f, 20, 20)
    b = half_map(f, 20, 20, shift)
    pa = extract_patches(a, np.array([[10, 10]]))[0]
    pb = extract_patches(b, np.array([[10, 10]]))[0]
    init, _ = pixel_refine(pa, pb)
    np.testing.assert_array_equal(init, shift)
    r = subpixel_refine(pa, pb, init)
    assert not r.fallback
    np.testing.assert_allclose(r.offset, shift, atol=1e-9)
    H = r.H_patch / r.H_patch[2, 2]
    assert np.abs(H[[0, 1, 2, 2], [1, 0, 0, 1]]).max() < 1e-9


def test_fractional_translation_is_subpixel_accurate():
    f = field(seed=2)
    for shift in [(1.3, -0.6), (2.7, 1.1)]:
        a = half_map(f, 20, 20)
        b = half_map(f, 20, 20, shift)
        pa = extract_patches(a, np.array([[10, 10]]))[0]
        pb = extract_patches(b, np.array([[10, 10]]))[0]
        init, _ = pixel_refine(pa, pb)
        r = subpixel_refine(pa, pb, init)
        assert np.linalg.norm(r.offset - shift) < 0.2


def test_blank_b_patch_falls_back():
    f = field()
    pa = extract_patches(half_map(f, 16, 16), np.array([[8, 8]]))[0]
    r = subpixel_refine(pa, np.zeros_like(pa), np.array([0, 0]))
    assert r.fallback
    np.testing.assert_array_equal(r.offset, [0, 0])


def test_batch_equals_single():
    f = field(seed=3)
    a = half_map(f, 24, 24)
    b = half_map(f, 24, 24, (3.0, -1.0))
    centers = np.array([[4, 4], [12, 8], [20, 20], [0, 23], [9, 15]])
    pa, pb = extract_patches(a, centers), extract_patches(b, centers)
    init, _, off, hs, fb = _refine_batch(pa, pb)
    for n in range(len(centers)):
        i1, _ = pixel_refine(pa[n], pb[n])
        r = subpixel_refine(pa[n], pb[n], i1)
        np.testing.assert_array_equal(init[n], i1)
        np.testing.assert_allclose(off[n], r.offset, atol=1e-12)
        assert fb[n] == r.fallback


def test_refine_matches_order_and_coordinates():
    f = field(seed=4)
    a = half_map(f, 16, 16)
    b = half_map(f, 16, 16, (4.0, 2.0))
    m = MatchSet(np.array([9, 6]), np.array([9, 6]), np.ones(2, np.float32))  # 4x4 token grid at 1/8
    r = refine_matches(a, b, m, (4, 4), (4, 4))
    np.testing.assert_array_equal(r.points_a, [[8, 16], [16, 8]])
    np.testing.assert_array_equal(r.centers_b, r.points_a)
    np.testing.assert_allclose(r.positions, r.points_a + [4.0, 2.0], atol=1e-9)
    assert len(r) == 2 and r.correlations.shape == (2, 9, 9)


def test_fusion_shapes():
    rng = make_rng(0, "fpn")
    w = init_fpn_weights((4, 6, 8), 16, rng)
    coarse = rng.normal(size=(2, 3, 16)).astype(np.float32)
    lat = rng.normal(size=(4, 6, 8)).astype(np.float32)
    assert fuse_level(lat, coarse, w, "fpn.l8").shape == (4, 6, 8)
    pyr = {2: rng.normal(size=(16, 24, 4)), 4: rng.normal(size=(8, 12, 6)), 8: lat}
    f8, f2 = fuse_pyramid(pyr, coarse, w)
    assert f8.shape == (4, 6, 8) and f2.shape == (16, 24, 4)


def test_fusion_constant_input_stays_constant():
    # edge-replicated borders: a constant map gives a constant output
    rng = make_rng(1, "fpn")
    w = init_fpn_weights((4, 4, 4), 4, rng)
    out = fuse_level(np.ones((6, 6, 4), np.float32), np.ones((3, 3, 4), np.float32), w, "fpn.l4")
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape), atol=1e-5)


@given(st.integers(0, 2**31 - 1))
def test_offsets_stay_inside_window(seed):
    rng = np.random.default_rng(seed)
    pa = rng.normal(size=(6, 5, 5, 8)).astype(np.float32)
    pb = rng.normal(size=(6, 5, 5, 8)).astype(np.float32)
    pb[0] = 0.0
    init, _, off, hs, fb = _refine_batch(pa, pb)
    assert np.abs(off).max() <= 4.0 and np.abs(init).max() <= 4
    assert np.isfinite(hs).all() and np.allclose(hs[:, 2, 2], 1.0)
    assert fb[0]
