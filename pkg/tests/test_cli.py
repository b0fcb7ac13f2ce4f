import csv
import json

import numpy as np
import pytest

from amsl.checkpoint import load_checkpoint
from amsl.cli import main

TINY = ["--window-length", "16", "--channels", "3", "--memory-size", "4", "--feature-size", "8",
        "--epochs", "1", "--batch-size", "16", "--seed", "0"]


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out-dir", str(d), "--window-length", "16", "--series-per-class", "2",
                 "--anomalies", "8"]) == 0
    assert main(["train", "--out-dir", str(d), "--corpus", str(d / "corpus.csv"), *TINY]) == 0
    return d


def test_train_outputs(workdir):
    hist = rows(workdir / "history.csv")
    assert len(hist) == 1 and list(hist[0]) == ["epoch", "recon", "ce", "sparse", "total", "val_total"]
    cfg = json.loads((workdir / "config.json").read_text())
    assert cfg["memory_size"] == 4 and cfg["window_length"] == 16


def test_rerun_same_seed_identical_history(workdir, tmp_path):
    assert main(["train", "--out-dir", str(tmp_path), "--corpus", str(workdir / "corpus.csv"), *TINY]) == 0
    assert (tmp_path / "history.csv").read_bytes() == (workdir / "history.csv").read_bytes()


def test_flags_override_config_file(workdir, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"memory_size": 9, "epochs": 7}))
    assert main(["train", "--out-dir", str(tmp_path), "--corpus", str(workdir / "corpus.csv"),
                 "--config", str(tmp_path / "c.json"), *TINY]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["memory_size"] == 4 and cfg["epochs"] == 1


def test_detect_before_calibration_fails(workdir, tmp_path, capsys):
    ck = tmp_path / "m.amsl"
    ck.write_bytes((workdir / "model.amsl").read_bytes())
    assert main(["detect", "--out-dir", str(tmp_path), "--checkpoint", str(ck),
                 "--corpus", str(workdir / "corpus.csv")]) == 2
    assert "calibrate" in capsys.readouterr().err


@pytest.fixture(scope="module")
def calibrated(workdir):
    assert main(["calibrate", "--out-dir", str(workdir), "--corpus", str(workdir / "corpus.csv"),
                 "--percentile", "90,95,99"]) == 0
    return workdir


def test_percentile_sweep_ordering(calibrated):
    th = rows(calibrated / "thresholds.csv")
    assert [float(r["percentile"]) for r in th] == [90.0, 95.0, 99.0]
    mus = [float(r["mu"]) for r in th]
    assert mus == sorted(mus)
    assert load_checkpoint(calibrated / "model.amsl").threshold.mu == mus[0]


def test_detect_and_eval(calibrated, tmp_path):
    assert main(["detect", "--out-dir", str(tmp_path), "--checkpoint", str(calibrated / "model.amsl"),
                 "--corpus", str(calibrated / "corpus.csv")]) == 0
    det = rows(tmp_path / "detections.csv")
    assert det and {r["pred"] for r in det} <= {"normal", "abnormal"}
    assert {r["truth"] for r in det} == {"normal", "abnormal"}
    assert main(["eval", "--out-dir", str(tmp_path), "--checkpoint", str(calibrated / "model.amsl"),
                 "--corpus", str(calibrated / "corpus.csv")]) == 0
    summary = json.loads((tmp_path / "metrics.json").read_text())
    assert set(summary["metrics"]) == {"mPre", "mRec", "mF1", "Acc", "F1_normal", "F1_abnormal"}
    assert summary["n_windows"] == len(det)


def test_detect_without_truth(calibrated, tmp_path):
    assert main(["detect", "--out-dir", str(tmp_path), "--checkpoint", str(calibrated / "model.amsl"),
                 "--corpus", str(calibrated / "corpus.csv"), "--all-windows", "--no-truth"]) == 0
    det = rows(tmp_path / "detections.csv")
    assert all(r["truth"] == "" and r["error"] for r in det)
    # 8 normal series of 10 windows plus 8 single-window anomalies
    assert len(det) == 88


def test_export_weights(calibrated, tmp_path):
    assert main(["export-weights", "--out-dir", str(tmp_path), "--checkpoint", str(calibrated / "model.amsl")]) == 0
    fw = rows(tmp_path / "fusion_weights.csv")
    assert len(fw) == 1 and len(fw[0]) == 15
    assert np.loadtxt(tmp_path / "memory_global.csv", delimiter=",").shape == (4, 8)
    assert (tmp_path / "memory_local_6.csv").exists()


def test_sweep_rows_and_failures(workdir, tmp_path):
    assert main(["sweep", "--out-dir", str(tmp_path), "--corpus", str(workdir / "corpus.csv"), *TINY,
                 "--sweep-axis", "R", "--sweep-values", "7,0,x"]) == 0
    out = rows(tmp_path / "sweep_R.csv")
    assert [r["value"] for r in out] == ["7", "0", "x"]
    assert [r["status"] for r in out] == ["ok", "failed", "failed"]
    assert 0 <= float(out[0]["mF1"]) <= 1


@pytest.mark.parametrize("extra,code", [
    (["--lambda2", "-1"], 2),
    (["--window-length", "2"], 2),
    (["--corpus", "/nonexistent/corpus.csv"], 3),
])
def test_exit_codes(tmp_path, extra, code):
    assert main(["train", "--out-dir", str(tmp_path), *TINY, *extra]) == code
    assert not (tmp_path / "model.amsl").exists()


def test_bad_checkpoint_exit_code(tmp_path):
    (tmp_path / "m.amsl").write_bytes(b"junk")
    assert main(["eval", "--out-dir", str(tmp_path), "--checkpoint", str(tmp_path / "m.amsl")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(workdir, tmp_path):
    assert main(["train", "--out-dir", str(tmp_path), "--corpus", str(workdir / "corpus.csv"), *TINY,
                 "--lr", "1e30", "--epochs", "3"]) == 4
