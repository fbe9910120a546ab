"""Named invariant checks run by ``oamatch verify``.

Each check raises ``AssertionError`` on failure.  The set is deliberately
fast (seconds) and self-contained: oracles here are loops or closed forms,
never the code path under test.
"""

from __future__ import annotations

import contextlib
import os
import tempfile
import traceback
import warnings
from pathlib import Path
from typing import Callable

import numpy as np

from . import attention, backbone, geometry, matching, oapm, pipeline, supervision, synth, tensor
from .config import PipelineConfig, dumps, load_config, save_config
from .tensor import Tensor, backward, finite_diff_grad

FAULT_ENV = "OAMATCH_INJECT_FAULT"

CHECKS: dict[str, Callable[[], None]] = {}


def check(fn):
    CHECKS[fn.__name__.removeprefix("check_")] = fn
    return fn


def _rng(seed=0):
    return np.random.default_rng(seed)


def _tiny_config(**kw) -> PipelineConfig:
    base = dict(c_fine=8, c_coarse=16, backbone_width=8, l1=1, l2=1, l3=1)
    base.update(kw)
    return PipelineConfig(**base)


@check
def check_matmul_triple_loop():
    a, b = _rng().standard_normal((4, 5)), _rng(1).standard_normal((5, 3))
    ref = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(tensor.matmul(Tensor(a), Tensor(b)).data - ref)) < 1e-12


@check
def check_matmul_associativity():
    r = _rng(2)
    a, b, c = (Tensor(r.standard_normal(s)) for s in ((3, 4), (4, 5), (5, 2)))
    lhs = tensor.matmul(tensor.matmul(a, b), c).data
    rhs = tensor.matmul(a, tensor.matmul(b, c)).data
    assert np.max(np.abs(lhs - rhs)) < 1e-9


@check
def check_softmax_normalised():
    x = _rng(3).standard_normal((6, 7)) * 5
    for axis in (0, 1):
        s = tensor.softmax(Tensor(x), axis).data
        assert np.all(np.abs(s.sum(axis=axis) - 1) < 1e-9)
        assert np.all((s > 0) & (s < 1))


@check
def check_softmax_overflow_safe():
    s = tensor.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(s)) and abs(s[0] - 1) < 1e-12 and s[1] < 1e-300


@check
def check_softmax_permutation_equivariant():
    x = _rng(4).standard_normal(9)
    perm = _rng(5).permutation(9)
    assert np.array_equal(tensor.softmax(Tensor(x[perm])).data, tensor.softmax(Tensor(x)).data[perm])


@check
def check_elu_plus_one_positive():
    x = np.linspace(-50, 50, 101)
    y = tensor.activation("elu_plus_one", Tensor(x)).data
    assert np.all(y > 0) and y[50] == 1.0


@check
def check_depthwise_delta_identity():
    x = _rng(6).standard_normal((3, 5, 4))
    k = np.zeros((3, 3, 3))
    k[:, 1, 1] = 1
    assert np.array_equal(tensor.depthwise_conv3x3(Tensor(x), Tensor(k)).data, x)


@check
def check_backward_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(tensor.sum_(x * x))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


@check
def check_gradient_vs_finite_difference():
    r = _rng(7)
    x = Tensor(r.standard_normal((2, 4, 4)), requires_grad=True)
    k = Tensor(r.standard_normal((2, 3, 3)), requires_grad=True)

    def f(_):
        y = tensor.depthwise_conv3x3(x, k)
        return tensor.sum_(tensor.gelu(y) * tensor.softmax(y.reshape(2, 16), 1).reshape(2, 4, 4))

    backward(f(None))
    for t in (x, k):
        num = finite_diff_grad(f, t, 1e-6)
        assert np.max(np.abs(num - t.grad) / np.maximum(np.maximum(abs(num), abs(t.grad)), 1e-6)) < 1e-4


@check
def check_weights_roundtrip():
    w = pipeline.init_weights(_tiny_config())
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "w.json"
        w.save(path)
        back = tensor.load_weights(path)
    for name, t in w.named().items():
        assert np.array_equal(back[name].data, t.data), name


@check
def check_grid_keypoint_order():
    kps = backbone.grid_keypoints(24, 32)
    for r in range(3):
        for c in range(4):
            assert tuple(kps[r * 4 + c]) == (8 * c + 4, 8 * r + 4)


@check
def check_coarse_flatten_spike():
    coarse = np.zeros((5, 3, 4))
    coarse[:, 2, 1] = 7.0
    seq = backbone.flatten_coarse(Tensor(coarse)).data
    assert np.flatnonzero(seq.any(axis=1)).tolist() == [2 * 4 + 1]


@check
def check_linear_attention_association():
    r = _rng(8)
    layer = attention.init_layer(r, 8, use_depthwise=False)
    u, v = r.standard_normal((6, 8)), r.standard_normal((5, 8))
    m = attention.linear_attention(Tensor(u), Tensor(v), layer).data
    q = tensor.elu_plus_one(Tensor(u @ layer.w_q.data)).data
    k = tensor.elu_plus_one(Tensor(v @ layer.w_k.data)).data
    dense = (q @ k.T) @ (v @ layer.w_v.data)
    assert np.max(np.abs(m - dense)) < 1e-9 * max(1.0, np.abs(dense).max())


@check
def check_linear_attention_permutation():
    r = _rng(9)
    layer = attention.init_layer(r, 8, use_depthwise=False)
    u, v = r.standard_normal((6, 8)), r.standard_normal((5, 8))
    pu, pv = r.permutation(6), r.permutation(5)
    base = attention.linear_attention(Tensor(u), Tensor(v), layer).data
    assert np.allclose(attention.linear_attention(Tensor(u), Tensor(v[pv]), layer).data, base, rtol=0, atol=1e-10)
    assert np.allclose(attention.linear_attention(Tensor(u[pu]), Tensor(v), layer).data, base[pu], rtol=0, atol=1e-10)


@check
def check_tel_zero_branch_identity():
    r = _rng(10)
    layer = attention.init_layer(r, 8)
    u = Tensor(r.standard_normal((4, 8)))
    assert np.array_equal(attention.tel(u, Tensor(r.standard_normal((4, 8))), layer, (2, 2)).data, u.data)


@check
def check_eitm_update_order():
    # with only the A-cross and B-cross layers active, B's update must see A's new value
    r = _rng(11)
    blocks = attention.init_blocks(r, 1, 4, 4, use_depthwise=False)
    for layer in blocks[0][2:]:
        layer.contract_w.data = r.standard_normal(layer.contract_w.shape) * 0.1
    fa, fb = Tensor(r.standard_normal((3, 4))), Tensor(r.standard_normal((3, 4)))
    _, out_b = attention.interleave(fa, fb, blocks)
    new_a = attention.tel(fa, fb, blocks[0][2])
    expect = attention.tel(fb, new_a, blocks[0][3])
    assert np.array_equal(out_b.data, expect.data)


@check
def check_dual_softmax_bounds():
    s = _rng(12).standard_normal((7, 9)) * 3
    g = oapm.score_and_assign(Tensor(s), Tensor(np.eye(9))).assignment.data
    row = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    col = np.exp(s) / np.exp(s).sum(0, keepdims=True)
    assert np.all(g <= np.minimum(row, col) + 1e-15) and np.all(g.sum(1) <= 1 + 1e-12)


@check
def check_adaptive_threshold_is_mean():
    pm = _rng(13).random((6, 5))
    assert abs(oapm.adaptive_threshold(pm) - pm.mean()) < 1e-12


@check
def check_close_idempotent():
    m = _rng(14).random((12, 12)) < 0.3
    once = oapm.morph_close(m, 3)
    assert np.array_equal(oapm.morph_close(once, 3), once)


@check
def check_contour_single_component():
    m = _rng(15).random((10, 10)) < 0.5
    cm = oapm.max_contour_fill(m).mask
    assert len(oapm._components(cm)) == 1
    assert np.array_equal(oapm.border_reachable(~cm), ~cm)


@check
def check_mnn_oracle():
    r = _rng(16)
    for _ in range(50):
        g = r.random((8, 8))
        got = {tuple(p) for p in matching.propose_coarse(g, 0.2)}
        ref = set()
        for i in range(8):
            for j in range(8):
                if g[i, j] > 0.2 and all(g[i, j] > g[i, k] for k in range(8) if k != j) and all(
                    g[i, j] > g[k, j] for k in range(8) if k != i
                ):
                    ref.add((i, j))
        assert got == ref


@check
def check_mnn_transpose_symmetry():
    g = _rng(17).random((6, 8))
    fwd = {tuple(p) for p in matching.propose_coarse(g, 0.1)}
    bwd = {(j, i) for i, j in matching.propose_coarse(g.T, 0.1)}
    assert fwd == bwd


@check
def check_mlws_rows():
    kps = backbone.grid_keypoints(32, 32)
    pair = synth.synth_pair(32, 0, (3.3, 1.7))
    _, lc_a = None, supervision.confidence_rows(*pair.warp_ab(kps), len(kps), (4, 4), 0.01)
    for row in lc_a:
        nz = np.flatnonzero(row)
        assert len(nz) in (0, 2)
        if len(nz):
            assert abs(row.sum() - 1) < 1e-9


@check
def check_gt_shifted_permutation():
    pair = synth.synth_pair(32, 0, (8.0, 0.0))
    kps = backbone.grid_keypoints(32, 32)
    labels, _ = supervision.make_gt_and_confidence(kps, kps, pair.frame_a, pair.frame_b, 0.01)
    ref = np.zeros((16, 16))
    for r in range(4):
        for c in range(3):
            ref[r * 4 + c, r * 4 + c + 1] = 1
    assert np.array_equal(labels.gt, ref)


@check
def check_total_loss_weights():
    b = supervision.LossBundle(*(Tensor(1.0) for _ in range(4)))
    assert abs(supervision.total_loss(b).item() - 2.4) < 1e-12


@check
def check_homography_recovery():
    H = np.array([[1.0, 0.0, 5.0], [0.0, 1.0, -3.0], [0.0, 0.0, 1.0]])
    src = _rng(18).uniform(0, 50, (6, 2))
    est = geometry.estimate_homography_dlt(src, geometry.apply_homography(H, src))
    assert np.max(np.abs(est - H)) < 1e-9


@check
def check_ccm_shift():
    H = np.eye(3)
    T = np.array([[1.0, 0, 2.0], [0, 1, 0], [0, 0, 1]])
    assert abs(geometry.ccm(T @ H, H, 64, 48) - 2.0) < 1e-9


@check
def check_pose_auc_riemann():
    errs = np.array([1.0, 3.0, 9.0, np.inf])
    auc = geometry.pose_auc(errs, (5,))[5]
    xs = (np.arange(10000) + 0.5) * 5 / 10000
    # curve is held flat past the last error under the threshold
    below = np.sort(errs[errs < 5])
    curve = np.interp(xs, np.concatenate([[0], below]), np.arange(len(below) + 1) / len(errs))
    assert abs(auc - curve.mean()) < 1e-4


@check
def check_pipeline_mask_containment():
    cfg = _tiny_config(rho=0.0)
    pair = synth.synth_pair(32, 1, (4.0, 2.0))
    res = pipeline.forward((pair.img_a, pair.img_b), pipeline.init_weights(cfg), cfg)
    ca = oapm_cells(res.matches.coords_a, res.cm_a.mask)
    cb = oapm_cells(res.coarse.coords_b, res.cm_b.mask)
    assert ca.all() and cb.all()


def oapm_cells(coords: np.ndarray, mask: np.ndarray) -> np.ndarray:
    cols = np.floor(coords[:, 0] / backbone.GRID).astype(int)
    rows = np.floor(coords[:, 1] / backbone.GRID).astype(int)
    return mask[rows, cols]


@check
def check_pipeline_determinism():
    cfg = _tiny_config()
    pair = synth.synth_pair(32, 2, (4.0, 2.0))
    w = pipeline.init_weights(cfg)
    r1 = pipeline.forward((pair.img_a, pair.img_b), w, cfg)
    r2 = pipeline.forward((pair.img_a, pair.img_b), w, cfg)
    assert np.array_equal(r1.assignment, r2.assignment)
    assert np.array_equal(r1.matches.coords_b, r2.matches.coords_b)


@check
def check_config_roundtrip():
    cfg = PipelineConfig(rho=0.123456789012345, alpha=(1, 2, 0.3, 0.4))
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "c.json"
        save_config(cfg, path)
        assert load_config(path) == cfg and dumps(load_config(path)) == dumps(cfg)


@check
def check_hyperparameter_defaults():
    c = PipelineConfig()
    assert (c.rho, c.window, c.kappa, c.eta, c.close_kernel, c.gamma) == (0.2, 5, 0.01, 8.0, 10, 4)
    assert (c.l1, c.l2, c.l3, c.alpha, c.c_fine, c.c_coarse) == (2, 2, 2, (1.0, 1.0, 0.2, 0.2), 128, 256)


@contextlib.contextmanager
def injected_fault(name: str | None):
    if name == "softmax":
        tensor._softmax_fault = 2.0
    elif name:
        raise ValueError(f"unknown fault {name!r}")
    try:
        yield
    finally:
        tensor._softmax_fault = 1.0


def run_checks(fault: str | None = None, echo=print) -> dict[str, bool]:
    fault = fault if fault is not None else os.environ.get(FAULT_ENV) or None
    results = {}
    with injected_fault(fault), warnings.catch_warnings():
        warnings.simplefilter("ignore", supervision.SupervisionWarning)
        for name, fn in CHECKS.items():
            try:
                fn()
                ok = True
                detail = ""
            except Exception as exc:  # report every failure, keep going
                ok = False
                detail = f"  ({type(exc).__name__}: {exc})" if str(exc) else f"  ({type(exc).__name__})"
                if os.environ.get("OAMATCH_VERIFY_TRACE"):
                    traceback.print_exc()
            results[name] = ok
            echo(f"{'PASS' if ok else 'FAIL'}  {name}{detail}")
    return results
