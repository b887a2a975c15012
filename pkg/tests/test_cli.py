import json

import numpy as np
import pytest

from tsleak import cli
from tsleak import federation as fed


def run(argv):
    assert cli.main(argv) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full synthetic pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    run([
        "data", "prepare", "--synthetic", "--h", "12", "--f", "6",
        "--period", "12", "--length", "480", "--step-attack", "12",
        "--step-aux", "3", "--seed", "1", "--out", str(root / "ds"),
    ])
    run([
        "model", "init", "--arch", "fcn", "--h", "12", "--f", "6",
        "--hidden", "8", "--seed", "2", "--out", str(root / "model.ckpt"),
    ])
    run([
        "capture", "--model", str(root / "model.ckpt"), "--data", str(root / "ds"),
        "--batch-size", "1", "--seed", "3", "--out", str(root / "cap"),
    ])
    run([
        "attack", "--capture", str(root / "cap"), "--model", str(root / "model.ckpt"),
        "--method", "ts-inverse", "--steps", "300", "--lr", "0.05",
        "--seed", "4", "--out", str(root / "res"),
    ])
    return root


def test_dataset_dir_contents(pipeline):
    assert (pipeline / "ds" / "windows.bin").exists()
    assert (pipeline / "ds" / "aux_windows.bin").exists()
    manifest = json.loads((pipeline / "ds" / "manifest.json").read_text())
    assert manifest["h"] == 12 and manifest["f"] == 6
    assert set(manifest["split"]) == {"train", "val", "test"}


def test_checkpoint_files(pipeline):
    meta = json.loads((pipeline / "model.ckpt").read_text())
    assert meta["spec"]["architecture"] == "fcn"
    assert (pipeline / "model.ckpt.bin").exists()


def test_capture_files_and_attack_view(pipeline):
    cap = fed.load_capture(pipeline / "cap")
    assert cap.true_batch is None
    full = fed.load_capture(pipeline / "cap", include_truth=True)
    assert full.true_batch is not None


def test_eval_reports_good_reconstruction(pipeline):
    run([
        "eval", "--result", str(pipeline / "res"), "--capture", str(pipeline / "cap"),
        "--out", str(pipeline / "metrics.json"),
    ])
    report = json.loads((pipeline / "metrics.json").read_text())
    assert report["smape_obs"] < 0.10
    assert report["smape_tar"] < 0.10


def test_plot_writes_svgs(pipeline):
    run([
        "plot", "--result", str(pipeline / "res"), "--capture", str(pipeline / "cap"),
        "--out", str(pipeline / "figs"),
    ])
    files = sorted(p.name for p in (pipeline / "figs").glob("*.svg"))
    assert "recon_000.svg" in files
    assert "trace.svg" in files


def test_plot_without_truth(pipeline, tmp_path):
    run(["plot", "--result", str(pipeline / "res"), "--out", str(tmp_path / "figs2")])
    assert (tmp_path / "figs2" / "recon_000.svg").exists()


def test_defended_capture(pipeline, tmp_path):
    run([
        "capture", "--model", str(pipeline / "model.ckpt"), "--data", str(pipeline / "ds"),
        "--defense", "sign", "--seed", "5", "--out", str(tmp_path / "cap_sign"),
    ])
    cap = fed.load_capture(tmp_path / "cap_sign")
    assert set(np.unique(cap.grads)).issubset({-1.0, 0.0, 1.0})


def test_finv_train_and_bounds_attack(pipeline, tmp_path):
    run([
        "finv", "train", "--aux", str(pipeline / "ds"), "--model", str(pipeline / "model.ckpt"),
        "--epochs", "3", "--captures", "16", "--quantiles", "0.1,0.3,0.7,0.9",
        "--seed", "6", "--out", str(tmp_path / "finv"),
    ])
    run([
        "attack", "--capture", str(pipeline / "cap"), "--model", str(pipeline / "model.ckpt"),
        "--method", "ts-inverse", "--steps", "40", "--lq-obs", "0.5", "--lq-tar", "0.1",
        "--bounds", str(tmp_path / "finv"), "--seed", "7", "--out", str(tmp_path / "res_b"),
    ])
    assert (tmp_path / "res_b.bin").exists()


def test_lti_train_and_reconstruct(pipeline, tmp_path):
    run([
        "lti", "train", "--aux", str(pipeline / "ds"), "--model", str(pipeline / "model.ckpt"),
        "--epochs", "5", "--captures", "24", "--seed", "8", "--out", str(tmp_path / "lti"),
    ])
    run([
        "attack", "--capture", str(pipeline / "cap"), "--model", str(pipeline / "model.ckpt"),
        "--method", "lti", "--net", str(tmp_path / "lti"), "--out", str(tmp_path / "res_lti"),
    ])
    run([
        "eval", "--result", str(tmp_path / "res_lti"), "--capture", str(pipeline / "cap"),
        "--out", str(tmp_path / "m.json"),
    ])
    report = json.loads((tmp_path / "m.json").read_text())
    assert 0.0 <= report["smape_obs"] <= 2.0


def test_oneshot_method(pipeline, tmp_path):
    run([
        "attack", "--capture", str(pipeline / "cap"), "--model", str(pipeline / "model.ckpt"),
        "--method", "ts-inverse-oneshot", "--steps", "50", "--seed", "9",
        "--out", str(tmp_path / "res_os"),
    ])
    run([
        "eval", "--result", str(tmp_path / "res_os"), "--capture", str(pipeline / "cap"),
        "--out", str(tmp_path / "m.json"),
    ])
    report = json.loads((tmp_path / "m.json").read_text())
    assert report["smape_tar"] < 1e-6
