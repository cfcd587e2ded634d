import numpy as np
import pytest

from casp.interaction import (
    InteractionState,
    aggregated_attention,
    hybrid_block,
    init_interaction_weights,
    run_hybrid,
    sinusoid_2d,
)
from casp.rng import make_rng

C = 16


@pytest.fixture(scope="module")
def weights():
    return init_interaction_weights(2, C, make_rng(0, "test-inter"))


def _state(seed, shapes=((4, 6), (6, 4))):
    rng = make_rng(seed, "state")
    (ha, wa), (hb, wb) = shapes
    f = lambda h, w: rng.normal(size=(h, w, C)).astype(np.float32)  # noqa: E731
    return InteractionState(f(ha, wa), f(hb, wb), f((ha + 1) // 2, (wa + 1) // 2), f((hb + 1) // 2, (wb + 1) // 2))


def test_view_swap_is_bit_exact(weights):
    s = _state(1)
    fwd = run_hybrid(s, weights, 2, heads=4)
    rev = run_hybrid(s.swapped(), weights, 2, heads=4)
    for a, b in [(fwd.f16a, rev.f16b), (fwd.f16b, rev.f16a), (fwd.f32a, rev.f32b), (fwd.f32b, rev.f32a)]:
        assert np.array_equal(a, b)


def test_shapes_preserved_for_unequal_views(weights):
    s = _state(2, ((6, 2), (2, 8)))
    out = hybrid_block(s, weights, "inter.b0", heads=4)
    assert out.f16a.shape == (6, 2, C) and out.f16b.shape == (2, 8, C)
    assert out.f32a.shape == s.f32a.shape and out.f32b.shape == s.f32b.shape
    assert all(np.isfinite(x).all() for x in (out.f16a, out.f16b, out.f32a, out.f32b))


def test_zero_blocks_only_adds_position_code(weights):
    s = _state(3)
    out = run_hybrid(s, weights, 0)
    np.testing.assert_allclose(out.f16a, s.f16a + sinusoid_2d(4, 6, C))
    np.testing.assert_array_equal(out.f32a, s.f32a)


def test_sinusoid_code():
    pe = sinusoid_2d(3, 5, 8)
    np.testing.assert_allclose(pe[0, 1, 0], np.sin(2.0), rtol=1e-6)
    np.testing.assert_allclose(pe[2, 0, 3], np.cos(3.0), rtol=1e-6)
    # distinct positions get distinct codes
    flat = pe.reshape(-1, 8)
    assert len(np.unique(flat.round(5), axis=0)) == 15
    with pytest.raises(ValueError):
        sinusoid_2d(2, 2, 6)


def test_cross_attention_depends_on_source(weights):
    s = _state(4)
    a1 = aggregated_attention(s.f16a, s.f16b, weights, "inter.b0.cross", 4)
    a2 = aggregated_attention(s.f16a, s.f16b * 2, weights, "inter.b0.cross", 4)
    assert not np.allclose(a1, a2)


def test_scale_pair_must_match(weights):
    with pytest.raises(ValueError):
        hybrid_block(_state(5, ((5, 3), (4, 4))), weights, "inter.b0", heads=4)
