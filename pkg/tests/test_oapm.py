import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oamatch import oapm
from oamatch.tensor import Tensor

masks = st.tuples(st.integers(1, 12), st.integers(1, 12)).flatmap(lambda s: arrays(bool, s))
prob_maps = st.tuples(st.integers(1, 10), st.integers(1, 10)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(0, 1, allow_nan=False))
)


def softmaxes(s):
    e = np.exp(s - s.max())
    return e / e.sum(1, keepdims=True), e / e.sum(0, keepdims=True)


def assign(s):
    return oapm.score_and_assign(Tensor(s), Tensor(np.eye(s.shape[1]))).assignment.data


def component_count(mask):
    return len(oapm._components(mask))


def test_singleton_assignment():
    assert assign(np.array([[37.0]])).tolist() == [[1.0]]


def test_saturation_to_identity():
    assert np.allclose(assign(50.0 * np.eye(2)), np.eye(2), atol=1e-20)


def test_two_by_two_hand_oracle():
    s = np.array([[2.0, 0.0], [0.0, 1.0]])
    row = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    col = np.exp(s) / np.exp(s).sum(0, keepdims=True)
    assert np.allclose(assign(s), row * col, rtol=0, atol=1e-15)


@given(st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**16))
def test_dual_softmax_bounds(n, m, seed):
    s = np.random.default_rng(seed).standard_normal((n, m)) * 4
    g = assign(s)
    row, col = softmaxes(s)
    assert np.all(g <= np.minimum(row, col) + 1e-15)
    assert np.all(g.sum(1) <= 1 + 1e-12)


def test_probability_maps():
    pm_a, pm_b = oapm.probability_maps(np.eye(4), (2, 2))
    assert pm_a.tolist() == [[1, 1], [1, 1]] and pm_b.tolist() == [[1, 1], [1, 1]]
    pm_a, _ = oapm.probability_maps(np.full((4, 4), 0.3), (2, 2))
    assert np.all(pm_a == 0.3)


def test_probability_maps_loop_oracle(rng):
    g = rng.random((4, 6))
    pm_a, pm_b = oapm.probability_maps(g, (2, 2), (2, 3))
    for i in range(4):
        assert pm_a.ravel()[i] == max(g[i])
    for j in range(6):
        assert pm_b.ravel()[j] == max(g[:, j])


def test_threshold_examples():
    assert oapm.adaptive_threshold(np.full((3, 3), 0.7)) == pytest.approx(0.7, abs=1e-15)
    pm = np.array([[0.1, 0.2], [0.3, 0.4]])
    assert oapm.adaptive_threshold(pm) == pytest.approx(0.25, abs=1e-15)
    assert oapm.binarize(pm, 0.25).sum() == 2


@given(prob_maps, st.integers(0, 2**16))
def test_threshold_is_mean_and_permutation_invariant(pm, seed):
    lam = oapm.adaptive_threshold(pm)
    assert abs(lam - pm.mean()) < 1e-12
    shuffled = np.random.default_rng(seed).permutation(pm.ravel()).reshape(pm.shape)
    assert oapm.adaptive_threshold(shuffled) == lam


@given(prob_maps, st.floats(0.1, 10), st.floats(-1, 1))
def test_threshold_affine_order(pm, a, b):
    assert abs(oapm.adaptive_threshold(a * pm + b) - (a * oapm.adaptive_threshold(pm) + b)) < 1e-9


def test_binarize_constant_map_is_foreground():
    pm = np.full((4, 4), 0.125)
    assert oapm.binarize(pm, oapm.adaptive_threshold(pm)).all()


@given(prob_maps, st.floats(0, 1), st.floats(0, 1))
def test_binarize_monotone(pm, l1, l2):
    lo, hi = min(l1, l2), max(l1, l2)
    assert np.all(oapm.binarize(pm, hi) <= oapm.binarize(pm, lo))


def test_close_fills_short_gap():
    row = np.zeros((1, 12), dtype=bool)
    row[0, [4, 6]] = True
    out = oapm.morph_close(row, 3)
    assert out[0].tolist() == [i in (4, 5, 6) for i in range(12)]


def test_close_of_empty_is_empty():
    assert not oapm.morph_close(np.zeros((5, 5), dtype=bool), 10).any()


@given(masks, st.integers(1, 10))
def test_close_idempotent_and_extensive(m, k):
    once = oapm.morph_close(m, k)
    assert np.all(once >= m)
    assert np.array_equal(oapm.morph_close(once, k), once)


@given(masks, st.integers(1, 6))
def test_dilate_erode_loop_oracle(m, k):
    lo, hi = -(k // 2), k - 1 - k // 2
    h, w = m.shape
    dil = np.zeros_like(m)
    ero = np.ones_like(m)
    for r in range(h):
        for c in range(w):
            for dr in range(lo, hi + 1):
                for dc in range(lo, hi + 1):
                    rr, cc = r - dr, c - dc
                    if 0 <= rr < h and 0 <= cc < w and m[rr, cc]:
                        dil[r, c] = True
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and not m[rr, cc]:
                        ero[r, c] = False
    assert np.array_equal(oapm.dilate(m, k), dil)
    assert np.array_equal(oapm.erode(m, k), ero)


def test_contour_examples():
    block = np.zeros((8, 8), dtype=bool)
    block[2:5, 3:6] = True
    assert np.array_equal(oapm.max_contour_fill(block).mask, block)
    ring = np.zeros((7, 7), dtype=bool)
    ring[1:6, 1:6] = True
    ring[2:5, 2:5] = False
    solid = np.zeros_like(ring)
    solid[1:6, 1:6] = True
    assert np.array_equal(oapm.max_contour_fill(ring).mask, solid)
    two = np.zeros((8, 8), dtype=bool)
    two[0:4, 0:4] = True
    two[6, 6] = True
    out = oapm.max_contour_fill(two).mask
    assert out.sum() == 16 and not out[6, 6]


def test_contour_prefers_filled_area():
    # a ring of 16 cells enclosing 9 beats a solid 20-cell bar
    m = np.zeros((12, 12), dtype=bool)
    m[0:5, 0:5] = True
    m[1:4, 1:4] = False
    m[7, 0:12] = True
    m[8, 0:8] = True
    out = oapm.max_contour_fill(m).mask
    assert out[0:5, 0:5].all() and not out[7:].any()


@given(masks)
def test_contour_single_component_no_holes(m):
    cm = oapm.max_contour_fill(m)
    if not m.any():
        assert cm.degenerate and not cm.mask.any()
        return
    assert component_count(cm.mask) == 1
    assert np.array_equal(oapm.border_reachable(~cm.mask), ~cm.mask)


def test_empty_mask_falls_back_to_full_grid(caplog):
    pm = np.zeros((3, 3))
    # finite maps always keep their maximum, so only a NaN map can come out empty
    pm[1, 1] = np.nan
    cm = oapm.covisible_mask(pm, 3)
    assert cm.degenerate and cm.mask.all() and cm.indices.tolist() == list(range(9))
    assert "falling back" in caplog.text


def test_permutation_assignment_keeps_everything():
    g = np.eye(16)[np.random.default_rng(0).permutation(16)]
    pm_a, pm_b = oapm.probability_maps(g, (4, 4))
    for pm in (pm_a, pm_b):
        cm = oapm.covisible_mask(pm, 10)
        assert cm.mask.all() and len(cm.indices) == 16 and not cm.degenerate


def test_select_covisible(rng):
    feats = Tensor(rng.standard_normal((6, 3)))
    kps = rng.random((6, 2))
    full = oapm.CoVisibleMask(np.ones((2, 3), dtype=bool), np.arange(6))
    kp, f, idx = oapm.select_covisible(feats, kps, full)
    assert np.array_equal(f.data, feats.data) and idx.tolist() == list(range(6))
    single = np.zeros((2, 3), dtype=bool)
    single[1, 2] = True
    kp, f, idx = oapm.select_covisible(feats, kps, oapm.CoVisibleMask(single, np.array([5])))
    assert idx.tolist() == [5] and np.array_equal(kp, kps[[5]])


@given(arrays(bool, (3, 4)).filter(lambda m: m.any()), st.integers(0, 2**16))
def test_select_covisible_loop_oracle(m, seed):
    rng = np.random.default_rng(seed)
    feats, kps = rng.standard_normal((12, 2)), rng.random((12, 2))
    _, f, idx = oapm.select_covisible(Tensor(feats), kps, oapm.CoVisibleMask(m, np.flatnonzero(m)))
    rows = [feats[r * 4 + c] for r in range(3) for c in range(4) if m[r, c]]
    assert np.array_equal(f.data, np.array(rows))


def test_select_covisible_empty_raises(rng):
    with pytest.raises(oapm.DegenerateOverlap):
        oapm.select_covisible(Tensor(np.ones((4, 2))), np.ones((4, 2)), oapm.CoVisibleMask(np.zeros((2, 2), bool), np.zeros(0)))
