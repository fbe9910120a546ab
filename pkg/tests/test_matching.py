import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oamatch import matching as M
from oamatch.tensor import Tensor


def mnn_oracle(g, rho):
    n, m = g.shape
    out = set()
    for i in range(n):
        for j in range(m):
            row_ok = all(g[i, j] > g[i, k] for k in range(m) if k != j)
            col_ok = all(g[i, j] > g[k, j] for k in range(n) if k != i)
            if row_ok and col_ok and g[i, j] > rho:
                out.add((i, j))
    return out


def as_set(pairs):
    return {tuple(map(int, p)) for p in pairs}


def test_proposal_examples():
    assert as_set(M.propose_coarse(0.9 * np.eye(3), 0.2)) == {(0, 0), (1, 1), (2, 2)}
    assert len(M.propose_coarse(0.1 * np.eye(3), 0.2)) == 0
    assert as_set(M.propose_coarse(np.array([[0.5, 0.4], [0.45, 0.3]]), 0.2)) == {(0, 0)}


def test_exact_ties_never_match():
    assert len(M.propose_coarse(np.full((3, 3), 0.5), 0.2)) == 0


@given(
    st.tuples(st.integers(1, 8), st.integers(1, 8)).flatmap(lambda s: arrays(np.float64, s, elements=st.sampled_from([0.0, 0.1, 0.3, 0.5, 0.9]))),
    st.floats(0, 1),
)
def test_proposal_matches_oracle_with_ties(g, rho):
    assert as_set(M.propose_coarse(g, rho)) == mnn_oracle(g, rho)


@given(st.integers(0, 2**16), st.floats(0, 0.5))
def test_proposal_one_to_one_and_symmetric(seed, rho):
    g = np.random.default_rng(seed).random((6, 9))
    pairs = M.propose_coarse(g, rho)
    assert len(pairs) <= 6
    assert len(set(pairs[:, 0])) == len(pairs) == len(set(pairs[:, 1]))
    assert as_set(M.propose_coarse(g.T, rho)) == {(j, i) for i, j in as_set(pairs)}


def test_coarse_to_keypoints_lookup(rng):
    kps_a, kps_b = rng.random((4, 2)), rng.random((5, 2))
    g = rng.random((4, 5))
    cs = M.coarse_to_keypoints(np.array([[0, 4], [3, 1]]), kps_a, kps_b, g)
    assert np.array_equal(cs.coords_a, kps_a[[0, 3]]) and np.array_equal(cs.coords_b, kps_b[[4, 1]])
    assert cs.confidence.tolist() == [g[0, 4], g[3, 1]]
    with pytest.raises(IndexError):
        M.coarse_to_keypoints(np.array([[4, 0]]), kps_a, kps_b)


def test_fine_index_of_keypoint_centres():
    assert M.fine_index(np.array([[4.0, 12.0], [20.0, 28.0]])).tolist() == [[2, 6], [10, 14]]


def window_oracle(fine, x, y, w):
    c, h, wd = fine.shape
    fx, fy, r = int(x // 2), int(y // 2), w // 2
    out = np.zeros((w * w, c))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            yy, xx = fy + dy, fx + dx
            if 0 <= yy < h and 0 <= xx < wd:
                out[(dy + r) * w + dx + r] = fine[:, yy, xx]
    return out


@pytest.mark.parametrize("w", [1, 3, 5])
def test_crop_windows_oracle(w, rng):
    fine = rng.standard_normal((3, 16, 16))
    coords = np.array([[4.0, 4.0], [12.0, 20.0], [28.0, 28.0], [20.0, 4.0]])
    win = M.crop_windows(Tensor(fine), coords, w).data
    assert win.shape == (4, w * w, 3)
    for t, (x, y) in enumerate(coords):
        assert np.array_equal(win[t], window_oracle(fine, x, y, w))


def test_corner_window_zero_padding(rng):
    fine = rng.standard_normal((2, 8, 8)) + 5.0
    win = M.crop_windows(Tensor(fine), np.array([[0.0, 0.0]]), 5).data[0].reshape(5, 5, 2)
    assert not win[:2].any() and not win[:, :2].any() and np.all(win[2:, 2:] != 0)


def test_crop_windows_rejects_even(rng):
    with pytest.raises(ValueError):
        M.crop_windows(Tensor(np.zeros((1, 4, 4))), np.zeros((1, 2)), 4)


@pytest.fixture
def refine_params(rng):
    p = M.init_refinement(rng, 1, 4, 4)
    for layer in p.blocks[0]:
        layer.contract_w.data = rng.standard_normal(layer.contract_w.shape) * 0.1
    p.offset_w.data = rng.standard_normal(p.offset_w.shape)
    return p


def test_zero_heads(rng):
    p = M.init_refinement(rng, 1, 4, 4)
    p.conf_w.data[:] = 0.0
    wa, wb = Tensor(rng.standard_normal((3, 9, 4))), Tensor(rng.standard_normal((3, 9, 4)))
    theta, conf = M.refine(wa, wb, p)
    assert not theta.data.any() and np.all(conf.data == 0.5)


def test_refine_batch_equals_single(refine_params, rng):
    wa, wb = rng.standard_normal((4, 9, 4)), rng.standard_normal((4, 9, 4))
    theta, conf = M.refine(Tensor(wa), Tensor(wb), refine_params)
    for t in range(4):
        th1, c1 = M.refine(Tensor(wa[t : t + 1]), Tensor(wb[t : t + 1]), refine_params)
        assert np.array_equal(th1.data[0], theta.data[t]) and c1.data[0] == conf.data[t]


def test_refine_permutation(refine_params, rng):
    wa, wb = rng.standard_normal((5, 9, 4)), rng.standard_normal((5, 9, 4))
    perm = rng.permutation(5)
    theta, conf = M.refine(Tensor(wa), Tensor(wb), refine_params)
    tp, cp = M.refine(Tensor(wa[perm]), Tensor(wb[perm]), refine_params)
    assert np.array_equal(tp.data, theta.data[perm]) and np.array_equal(cp.data, conf.data[perm])


def coarse_set(coords_b):
    coords_b = np.asarray(coords_b, dtype=np.float64)
    return M.CoarseMatchSet(np.zeros((len(coords_b), 2), int), coords_b.copy(), coords_b, np.ones(len(coords_b)))


def test_fine_matches_offsets():
    cs = coarse_set([[100.0, 100.0], [50.0, 60.0]])
    fm = M.fine_matches(cs, np.array([[3.0, -2.0], [0.0, 0.0]]), np.array([0.9, 0.1]), (200, 200))
    assert fm.coords_b.tolist() == [[103.0, 98.0], [50.0, 60.0]] and not fm.clamped.any()


def test_fine_matches_clamp_and_flag():
    cs = coarse_set([[2.0, 30.0], [60.0, 60.0]])
    fm = M.fine_matches(cs, np.array([[-5.0, 40.0], [1.0, 1.0]]), np.ones(2), (64, 64))
    assert fm.coords_b[0].tolist() == [0.0, 64.0] and fm.clamped.tolist() == [True, False]


@given(arrays(np.int64, (6, 2), elements=st.integers(-384, 384)))
def test_fine_coarse_distance_equals_offset_norm(steps):
    # offsets on a 1/64 px lattice survive the round trip through 32 + theta exactly
    theta = steps / 64.0
    cs = coarse_set(np.full((6, 2), 32.0))
    fm = M.fine_matches(cs, theta, np.ones(6), (64, 64))
    assert np.array_equal(np.linalg.norm(fm.coords_b - cs.coords_b, axis=1), np.linalg.norm(theta, axis=1))


@given(arrays(np.float64, (6, 2), elements=st.floats(-6, 6)))
def test_fine_coarse_distance_close_to_offset_norm(theta):
    # general offsets: only the final rounding of coords_b separates the two norms
    cs = coarse_set(np.full((6, 2), 32.0))
    fm = M.fine_matches(cs, theta, np.ones(6), (64, 64))
    diff = np.linalg.norm(fm.coords_b - cs.coords_b, axis=1) - np.linalg.norm(theta, axis=1)
    assert np.all(np.abs(diff) <= 1e-13)


def test_match_file_roundtrip(tmp_path):
    cs = coarse_set([[4.0, 4.0], [12.0, 20.0]])
    fm = M.fine_matches(cs, np.array([[0.25, -0.5], [1.0, 0.0]]), np.array([0.75, 0.5]), (32, 32))
    M.write_matches(tmp_path / "m.txt", fm, (32, 48))
    rows, (h, w) = M.read_matches(tmp_path / "m.txt")
    assert (h, w) == (32, 48)
    assert np.allclose(rows, np.c_[fm.coords_a, fm.coords_b, fm.confidence], atol=1e-6)
    text = (tmp_path / "m.txt").read_text().splitlines()
    assert text[0] == "# width=48 height=32 count=2" and text[1] == "4.000000 4.000000 4.250000 3.500000 0.750000"


def test_empty_match_file(tmp_path):
    M.write_matches(tmp_path / "e.txt", M.empty_fine_matches(), (16, 16))
    assert (tmp_path / "e.txt").read_text() == "# width=16 height=16 count=0\n"
