import json

import numpy as np
import pytest

from oamatch import config as C
from oamatch import pipeline as P
from oamatch import synth
from oamatch.backbone import GRID


def cells(coords, mask):
    return mask[(coords[:, 1] // GRID).astype(int), (coords[:, 0] // GRID).astype(int)]


def test_identical_images_complete(tiny_config, pair32):
    cfg = tiny_config.replace(rho=0.0)
    res = P.forward((pair32.img_a, pair32.img_a), P.init_weights(cfg), cfg)
    assert res.cm_a.mask.shape == (4, 4) and len(res.matches) > 0
    assert cells(res.matches.coords_a, res.cm_a.mask).all()
    assert cells(res.coarse.coords_b, res.cm_b.mask).all()
    assert set(res.timings) == {"backbone", "eitm", "oapm", "oatm", "proposal", "refinement"}


def test_rho_one_gives_no_matches(tiny_config, pair32):
    cfg = tiny_config.replace(rho=1.0)
    res = P.forward((pair32.img_a, pair32.img_b), P.init_weights(cfg), cfg)
    assert len(res.coarse) == 0 and len(res.matches) == 0


def test_forward_deterministic(tiny_config, pair32):
    w = P.init_weights(tiny_config)
    r1 = P.forward((pair32.img_a, pair32.img_b), w, tiny_config)
    r2 = P.forward((pair32.img_a, pair32.img_b), P.init_weights(tiny_config), tiny_config)
    for a, b in ((r1.assignment, r2.assignment), (r1.matches.coords_b, r2.matches.coords_b), (r1.pm_a, r2.pm_a)):
        assert a.tobytes() == b.tobytes()


def test_stage_errors_name_the_stage(tiny_config, pair32):
    w = P.init_weights(tiny_config)
    w.eitm[0][0].w_q.data = np.ones((3, 3))
    with pytest.raises(P.StageError) as info:
        P.forward((pair32.img_a, pair32.img_b), w, tiny_config)
    assert info.value.stage == "eitm"


def test_weights_save_load(tmp_path, tiny_config):
    w = P.init_weights(tiny_config, seed=5)
    w.save(tmp_path / "w.json")
    back = P.load_matcher_weights(tmp_path / "w.json", tiny_config)
    for (n1, t1), (n2, t2) in zip(w.named().items(), back.named().items()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()
    with pytest.raises(ValueError):
        P.load_matcher_weights(tmp_path / "w.json", tiny_config.replace(c_fine=4))


def test_lr_zero_leaves_weights_unchanged(tiny_config, pair32):
    w = P.init_weights(tiny_config)
    before = {k: v.data.copy() for k, v in w.named().items()}
    P.train_toy([pair32], tiny_config, 1, learning_rate=0.0, weights=w)
    assert all(before[k].tobytes() == v.data.tobytes() for k, v in w.named().items())


def test_training_is_deterministic(tiny_config, pair32):
    a = P.train_toy([pair32], tiny_config, 3).losses
    b = P.train_toy([pair32], tiny_config, 3).losses
    assert a == b and a[-1] < a[0]


def test_nan_loss_aborts(tiny_config, pair32):
    w = P.init_weights(tiny_config)
    w.backbone.coarse_head.bias.data[:] = np.nan
    with pytest.raises(FloatingPointError, match="step 0"):
        P.train_toy([pair32], tiny_config, 2, weights=w)


def test_training_arguments(tiny_config, pair32):
    with pytest.raises(ValueError):
        P.train_toy([], tiny_config, 1)
    with pytest.raises(ValueError):
        P.train_toy([pair32], tiny_config, 0)


def test_loss_components_finite(tiny_config, pair32):
    sample = P.make_sample(pair32, tiny_config)
    loss, bundle, state = P.loss_and_state(sample, P.init_weights(tiny_config), tiny_config.replace(rho=0.0))
    assert np.isfinite(loss.item()) and all(np.isfinite(v) for v in bundle.components().values())
    assert state.theta is not None


# ---------------------------------------------------------------- synthetic data


def test_synth_same_seed_byte_identical(tmp_path):
    for run in ("a", "b"):
        for i, p in enumerate(synth.synth_dataset(2, 32, 7, "homography")):
            synth.write_pair(tmp_path / run / str(i), p)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synth_pair_roundtrip(tmp_path):
    p = synth.synth_pair(32, 2, (3.5, -2.0))
    synth.write_pair(tmp_path, p)
    q = synth.load_pair(tmp_path)
    assert np.array_equal(q.homography, p.homography)
    pts = np.array([[4.0, 4.0], [20.0, 12.0]])
    assert np.allclose(q.warp_ab(pts)[0], p.warp_ab(pts)[0], atol=1e-9)
    assert json.loads((tmp_path / "gt.json").read_text())["frame_a"]["depth"] == "depth_a.pgm"


def test_synth_images_follow_the_warp():
    p = synth.synth_pair(32, 4, (8.0, 0.0))
    assert np.allclose(p.img_b[:, 8:], p.img_a[:, :-8], atol=1e-12)


def test_synth_rejects_bad_size():
    with pytest.raises(ValueError):
        synth.synth_pair(30, 0)
    with pytest.raises(ValueError):
        synth.synth_dataset(1, 32, 0, kind="fisheye")


# ---------------------------------------------------------------- config


def test_defaults():
    c = C.PipelineConfig()
    assert (c.l1, c.l2, c.l3, c.gamma, c.close_kernel, c.rho, c.window, c.kappa, c.eta) == (2, 2, 2, 4, 10, 0.2, 5, 0.01, 8.0)
    assert c.alpha == (1.0, 1.0, 0.2, 0.2) and (c.c_fine, c.c_coarse) == (128, 256)


def test_config_roundtrip_and_env(tmp_path, monkeypatch):
    cfg = C.PipelineConfig(rho=0.1 + 0.2, kappa=1 / 3, positional_encoding=False, alpha=(0.5, 1, 2, 3))
    C.save_config(cfg, tmp_path / "c.json")
    assert C.load_config(tmp_path / "c.json") == cfg
    monkeypatch.setenv(C.CONFIG_ENV, str(tmp_path / "c.json"))
    assert C.load_config() == cfg
    monkeypatch.delenv(C.CONFIG_ENV)
    assert C.load_config() == C.PipelineConfig()


@pytest.mark.parametrize(
    "data",
    [{"rho": 0.1, "bogus": 1}, {"l1": 1.5}, {"positional_encoding": 1}, {"window": 4}, {"gamma": 3}, {"alpha": [1, 2]}],
)
def test_config_rejects(data):
    with pytest.raises(ValueError):
        C.PipelineConfig.from_dict(data)
