import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mbcnn import ArchConfig, build, self_ensemble
from mbcnn.cli import main
from mbcnn.io import load_checkpoint, read_image, save_checkpoint, write_image
from mbcnn.dct import read_passband_csv

SMALL = ArchConfig(n_g=4, n_d=2, k=2, p=4)


@pytest.fixture
def ckpt(tmp_path):
    m = build(SMALL, 1)
    for arr in m.passbands().values():
        arr[...] = np.linspace(0, 2, arr.size)
    path = tmp_path / "m.mbck"
    save_checkpoint(m, path)
    return path


def config(tmp_path, **extra):
    doc = {"explicit": {"p": 4, "n_g": 4, "n_d": 2, "k": 2},
           "train": {"lr": 1e-3, "batch": 2, "patch": 16, "epochs_max": 2, "seed": 0},
           "data": {"procedural": {"n": 4, "n_val": 2, "size": 16, "seed": 3}},
           "out_dir": str(tmp_path / "run")}
    doc.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["infer", "--ckpt", "x"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["infer", "--ckpt", "x", "--in", "a", "--out", "b", "--ablate", "no-gtmb"])
    assert exc.value.code == 2


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "case,max_rel_error,seconds,status"
    assert "FAIL" not in out


def test_gradcheck_failure_exit_1(monkeypatch):
    import mbcnn.verify as verify

    monkeypatch.setattr(verify, "run_suite", lambda seed=0: [verify.CheckResult("bad", 1.0, 0.0)])
    assert main(["gradcheck"]) == 1


def test_synth_train_eval(tmp_path, capsys):
    cfg = config(tmp_path)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    assert len(list((tmp_path / "data" / "train").glob("*_moire.png"))) == 4
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    for name in ("best.mbck", "metrics.csv", "curves.png"):
        assert (run / name).exists()
    assert main(["eval", "--ckpt", str(run / "best.mbck"), "--data", str(tmp_path / "data" / "val"),
                 "--csv", str(tmp_path / "scores.csv")]) == 0
    with open(tmp_path / "scores.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["id"] for r in rows] == ["00000", "00001", "mean"]
    mean = np.mean([float(r["psnr"]) for r in rows[:2]])
    assert float(rows[2]["psnr"]) == pytest.approx(mean, abs=1e-3)
    assert (tmp_path / "scores.png").exists()


def test_train_rejects_bad_config(tmp_path, capsys):
    cfg = config(tmp_path, unknown=1)
    assert main(["train", "--config", str(cfg)]) == 1
    assert "unknown" in capsys.readouterr().err


def test_infer_shapes_and_ablation(tmp_path, ckpt):
    img = np.random.default_rng(0).uniform(size=(24, 24, 3))
    write_image(img, tmp_path / "in.png")
    before = (tmp_path / "in.png").read_bytes()
    assert main(["infer", "--ckpt", str(ckpt), "--in", str(tmp_path / "in.png"),
                 "--out", str(tmp_path / "out.png")]) == 0
    assert read_image(tmp_path / "out.png").shape == (24, 24, 3)
    assert (tmp_path / "in.png").read_bytes() == before
    assert main(["infer", "--ckpt", str(ckpt), "--in", str(tmp_path / "in.png"),
                 "--out", str(tmp_path / "nlp.png"), "--ablate", "no-lp"]) == 0


def test_infer_self_ensemble_matches_library(tmp_path, ckpt):
    img = np.random.default_rng(1).uniform(size=(16, 16, 3))
    write_image(img, tmp_path / "in.png")
    assert main(["infer", "--ckpt", str(ckpt), "--in", str(tmp_path / "in.png"),
                 "--out", str(tmp_path / "se.png"), "--self-ensemble"]) == 0
    expected = self_ensemble(load_checkpoint(ckpt), read_image(tmp_path / "in.png"))
    assert np.abs(read_image(tmp_path / "se.png") - np.clip(expected, 0, 1)).max() <= 0.5 / 255 + 1e-6


def test_infer_missing_checkpoint_exit_1(tmp_path, capsys):
    assert main(["infer", "--ckpt", str(tmp_path / "nope.mbck"), "--in", "a.png", "--out", "b.png"]) == 1
    assert "nope.mbck" in capsys.readouterr().err


def test_export_passbands(tmp_path, ckpt):
    out = tmp_path / "bands"
    assert main(["export-passbands", "--ckpt", str(ckpt), "--out", str(out)]) == 0
    m = load_checkpoint(ckpt)
    assert len(list(out.glob("*.csv"))) == len(m.passbands()) == 5
    theta = read_passband_csv(out / "branch1_mtrb1.csv")
    np.testing.assert_array_equal(theta, m.passbands()["branch1/mtrb1/passband"])
    assert (out / "passbands.png").exists()
