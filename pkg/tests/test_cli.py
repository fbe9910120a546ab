import json
import subprocess
import sys

import numpy as np
import pytest

from oamatch import cli, geometry, pipeline, pnm, synth
from oamatch.config import PipelineConfig, save_config


@pytest.fixture
def workspace(tmp_path, tiny_config):
    save_config(tiny_config, tmp_path / "tiny.json")
    assert cli.main(["synth", "--count", "3", "--size", "32", "--seed", "4", "--out", str(tmp_path / "ds")]) == 0
    return tmp_path


def img(ws, i=0, side="a"):
    return str(ws / "ds" / f"pair_{i:04d}" / f"img_{side}.pgm")


def run(*args):
    return cli.main([str(a) for a in args])


def test_match_writes_files_idempotently(workspace):
    ws = workspace
    assert run("train", ws / "ds" / "pair_0000", "--steps", "200", "--config", ws / "tiny.json", "--out", ws / "tr") == 0
    args = ["match", img(ws), img(ws), "--weights", ws / "tr" / "weights.json", "--out", ws / "m"]
    assert run(*args) == 0
    first = {p.name: p.read_bytes() for p in (ws / "m").iterdir()}
    assert set(first) == {"matches.txt", "overlay.ppm"}
    assert int(first["matches.txt"].split(b"count=")[1].split()[0]) > 0
    assert run(*args) == 0
    assert first == {p.name: p.read_bytes() for p in (ws / "m").iterdir()}


def test_match_rho_one_header_only(workspace):
    ws = workspace
    assert run("match", img(ws), img(ws, side="b"), "--config", ws / "tiny.json", "--rho", "1.0", "--out", ws / "m") == 0
    assert (ws / "m" / "matches.txt").read_text() == "# width=32 height=32 count=0\n"


def test_match_user_errors(workspace, capsys):
    ws = workspace
    assert run("match", img(ws), ws / "missing.pgm", "--out", ws / "m") == 1
    assert "missing.pgm" in capsys.readouterr().err
    pnm.write_pnm(ws / "small.pgm", np.zeros((24, 32), np.uint8))
    assert run("match", img(ws), ws / "small.pgm", "--out", ws / "m") == 1
    (ws / "junk.pgm").write_bytes(b"not an image")
    assert run("match", img(ws), ws / "junk.pgm", "--out", ws / "m") == 1
    assert run("match", img(ws), img(ws), "--rho", "2", "--out", ws / "m") == 1
    assert run("match", img(ws), img(ws), "--weights", ws / "none.json", "--out", ws / "m") == 1
    (ws / "bad.json").write_text('{"nope": 1}')
    assert run("match", img(ws), img(ws), "--config", ws / "bad.json", "--out", ws / "m") == 1
    assert run("match", img(ws)) == 1
    assert not (ws / "m").exists()


def test_masks(workspace):
    ws = workspace
    assert run("masks", img(ws), img(ws, side="b"), "--config", ws / "tiny.json", "--out", ws / "k") == 0
    for name in ("pm_a", "pm_b", "cm_a", "cm_b"):
        arr, maxval = pnm.read_pnm(ws / "k" / f"{name}.pgm")
        assert arr.shape == (4, 4) and maxval == 255
        assert arr.min() >= 0 and arr.max() <= 255
        if name.startswith("cm"):
            assert set(np.unique(arr)) <= {0, 255}


def test_eval_ccm_perfect_estimates(workspace, capsys):
    ws = workspace
    dirs = [ws / "ds" / f"pair_{i:04d}" for i in range(3)]
    for d in dirs:
        (d / "est.txt").write_text((d / "homography.txt").read_text())
    assert run("eval-ccm", *dirs, "--estimate", "est.txt", "--out", ws / "ev") == 0
    assert "ccm@1: 1.0000" in capsys.readouterr().out
    report = json.loads((ws / "ev" / "ccm_report.json").read_text())
    assert report["values"] == {"1": 1.0, "3": 1.0, "5": 1.0}


def test_eval_ccm_mixed_against_oracle(workspace):
    ws = workspace
    dirs = [ws / "ds" / f"pair_{i:04d}" for i in range(3)]
    errors = []
    for shift, d in zip((0.5, 2.0, 7.0), dirs):
        H = synth.read_homography(d / "homography.txt")
        est = np.array([[1.0, 0, shift], [0, 1, 0], [0, 0, 1]]) @ H
        (d / "est.txt").write_text(synth.format_homography(est))
        errors.append(geometry.ccm(est, H, 32, 32))
    assert run("eval-ccm", *dirs, "--estimate", "est.txt", "--threads", "2", "--out", ws / "ev") == 0
    report = json.loads((ws / "ev" / "ccm_report.json").read_text())
    assert report["errors"] == pytest.approx(errors, abs=1e-9)
    assert report["values"] == {str(k): v for k, v in geometry.ccm_fractions(errors).items()}


def test_eval_ccm_runs_matcher(workspace):
    ws = workspace
    assert run("eval-ccm", ws / "ds" / "pair_0000", "--config", ws / "tiny.json", "--out", ws / "ev") == 0
    assert json.loads((ws / "ev" / "ccm_report.json").read_text())["count"] == 1


def test_eval_auc(tmp_path, capsys):
    (tmp_path / "zeros.txt").write_text("0 0 0\n0\n")
    assert run("eval-auc", tmp_path / "zeros.txt", "--out", tmp_path) == 0
    assert json.loads((tmp_path / "auc_report.json").read_text())["values"] == {"5": 1.0, "10": 1.0, "20": 1.0}
    (tmp_path / "mixed.txt").write_text("1 3 9 inf 25\n")
    assert run("eval-auc", tmp_path / "mixed.txt", "--out", tmp_path) == 0
    report = json.loads((tmp_path / "auc_report.json").read_text())
    expect = geometry.pose_auc([1, 3, 9, np.inf, 25])
    assert report["values"] == {str(k): v for k, v in expect.items()} and report["errors"][3] is None
    (tmp_path / "neg.txt").write_text("-1\n")
    assert run("eval-auc", tmp_path / "neg.txt") == 1
    assert run("eval-auc", tmp_path / "absent.txt") == 1


def test_synth_validation(tmp_path):
    assert run("synth", "--size", "20", "--out", tmp_path) == 1
    assert run("synth", "--count", "0", "--out", tmp_path) == 1


def test_train_outputs(workspace):
    ws = workspace
    assert run("train", "--steps", "2", "--size", "32", "--out", ws / "t") == 0
    losses = (ws / "t" / "losses.txt").read_text().split()
    assert len(losses) == 2
    cfg = json.loads((ws / "t" / "config.json").read_text())
    assert PipelineConfig.from_dict(cfg) == PipelineConfig.toy()
    assert run("train", ws / "nowhere", "--out", ws / "t") == 1
    assert run("train", "--steps", "0", "--out", ws / "t") == 1


def test_verify_clean_and_fault(capsys):
    assert run("verify") == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) >= 25 and all(ln.startswith("PASS") for ln in lines)
    assert run("verify", "--fault", "softmax") == 2
    out = capsys.readouterr().out
    assert "FAIL  softmax_normalised" in out


def test_verify_fault_from_environment():
    proc = subprocess.run(
        [sys.executable, "-m", "oamatch", "verify"],
        env={"OAMATCH_INJECT_FAULT": "softmax", "PATH": ""},
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2 and "FAIL" in proc.stdout


def uniform_attention_weights(cfg, path):
    w = pipeline.init_weights(cfg)
    for block in w.eitm:
        for layer in block:
            layer.w_k.data[:] = 0.0
    w.save(path)


def test_dump_attention(workspace):
    ws = workspace
    cfg = PipelineConfig(c_fine=8, c_coarse=16, backbone_width=8, l1=1, l2=1, l3=1)
    uniform_attention_weights(cfg, ws / "u.json")
    save_config(cfg, ws / "u_config.json")
    args = ["dump-attention", img(ws), img(ws, side="b"), "--weights", ws / "u.json", "--config", ws / "u_config.json"]
    assert run(*args, "--layer", "2", "--query", "5", "--out", ws / "d") == 0
    info = json.loads((ws / "d" / "attention.json").read_text())
    weights = [t["weight"] for t in info["top"]]
    assert len(weights) == 16 and sum(weights) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(weights, 1 / 16, rtol=0, atol=1e-15)
    canvas, _ = pnm.read_pnm(ws / "d" / "attention.ppm")
    # every ray is drawn at full, equal intensity
    # image pixels are grey; ray pixels are yellow (blue channel zero)
    ray = (canvas[..., 2] == 0) & (canvas[..., 0] > 0)
    assert ray.any() and set(np.unique(canvas[ray][:, 0])) == {255}
    assert run(*args, "--layer", "4", "--out", ws / "d") == 1
    assert run(*args, "--query", "16", "--out", ws / "d") == 1


def test_dump_attention_row_sums(workspace):
    ws = workspace
    assert run("dump-attention", img(ws), img(ws, side="b"), "--config", ws / "tiny.json", "--layer", "0", "--out", ws / "d") == 0
    info = json.loads((ws / "d" / "attention.json").read_text())
    weights = [t["weight"] for t in info["top"]]
    assert sum(weights) == pytest.approx(1.0, abs=1e-12) and weights == sorted(weights, reverse=True)
