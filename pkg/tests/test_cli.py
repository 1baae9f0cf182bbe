import json
import subprocess
import sys

import pytest

from crossmap import harness
from crossmap.cli import main
from crossmap.errors import NumericError
from crossmap.pinsker import read_features

TINY = {
    "synth": {"n_classes": 4, "n_channels": 3, "n_samples": 32, "n_trials_per_subject": 120},
    "n_train": 80, "n_test": 30, "reps": 1,
    "cvae": {"latent_dim": 5, "hidden_prior": 16, "hidden_recog": 16, "hidden_gen": 16,
             "batch_size": 20, "epochs": 2},
    "decoder_config": {"hidden": 16, "epochs": 2, "batch_size": 20},
}


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_pipeline(tmp_path, tiny_cfg, capsys):
    d = str(tmp_path)
    assert main(["synth", "--config", tiny_cfg, "--out", d]) == 0
    assert main(["features", "--trials", f"{d}/source.xtrl", "--l-coeffs", "3", "--out", f"{d}/s.xfea"]) == 0
    assert main(["features", "--trials", f"{d}/destination.xtrl", "--mu", "5", "--out", f"{d}/t.xfea"]) == 0
    assert read_features(f"{d}/t.xfea").L == 3
    assert main(["train-cvae", "--config", tiny_cfg, "--source", f"{d}/s.xfea", "--dest", f"{d}/t.xfea",
                 "--mode", "random", "--out", f"{d}/m.npz"]) == 0
    assert main(["train-decoder", "--config", tiny_cfg, "--features", f"{d}/t.xfea",
                 "--decoder", "lda", "--out", f"{d}/dec.npz"]) == 0
    assert main(["map", "--model", f"{d}/m.npz", "--features", f"{d}/s.xfea", "--map", "gen:2",
                 "--out", f"{d}/mapped.xfea"]) == 0
    capsys.readouterr()
    assert main(["eval", "--decoder", f"{d}/dec.npz", "--features", f"{d}/mapped.xfea"]) == 0
    assert capsys.readouterr().out.startswith("accuracy ")


def test_experiment_outputs_and_overrides(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "ex"
    assert main(["experiment", "--config", tiny_cfg, "--reps", "2", "--seed", "9", "--format", "json",
                 "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["config"]["reps"] == 2 and doc["config"]["seed"] == 9
    assert doc["config"]["n_train"] == 80 and doc["config"]["cvae"]["latent_dim"] == 5
    assert len(doc["reps"]) == 2
    assert "mapped_test, " in capsys.readouterr().out
    assert main(["experiment", "--config", tiny_cfg, "--no-mapping", "--decoder", "lda", "--out", str(out)]) == 0
    assert (out / "summary.csv").exists() and (out / "reps.csv").exists()


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["experiment"],
    ["experiment", "--out", "x", "--format", "xml"],
    ["experiment", "--out", "x", "--l-coeffs", "3", "--mu", "4"],
    ["experiment", "--out", "x", "--reps", "0"],
    ["experiment", "--out", "x", "--map", "gen:none"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as info:
        sys.exit(main(argv))
    assert info.value.code == 1


def test_data_errors_exit_2(tmp_path):
    assert main(["features", "--trials", str(tmp_path / "missing.xtrl"), "--out", str(tmp_path / "f")]) == 2
    bad = tmp_path / "bad.xtrl"
    bad.write_bytes(b"XTRL" + b"\x00" * 40)
    assert main(["features", "--trials", str(bad), "--out", str(tmp_path / "f")]) == 2
    assert main(["eval", "--decoder", str(bad), "--features", str(bad)]) == 2


def test_numeric_failure_exit_3(tmp_path, tiny_cfg, monkeypatch):
    def broken(cfg, s, d, r):
        raise NumericError("injected")

    monkeypatch.setattr(harness, "run_repetition", broken)
    assert main(["experiment", "--config", tiny_cfg, "--out", str(tmp_path)]) == 3
    monkeypatch.setattr(harness, "gradient_suite", lambda seed: {"elbo": 1.0})
    assert main(["gradcheck"]) == 3


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "crossmap", "gradcheck"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "crossmap", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
