import json

import pytest

from structens.cli import main
from structens.data import make_synthetic, write_csv

CONFIG = """
[data]
classes = 3
samples = 240
[model]
backbone = mlp-8-8
[ensemble]
members = 2
mask_epochs = 1
[training]
epochs = 3
patience = 0
[evaluation]
fgsm_eps = 0.05
noise_sigma = 0.0
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(CONFIG)
    return path


def test_train_eval_report(config, tmp_path, capsys):
    out = tmp_path / "ens"
    assert main(["train-ensemble", "--config", str(config), "--output", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["label"] == "structured-ensemble"

    data = tmp_path / "data"
    data.mkdir()
    ds = make_synthetic("spirals", 3, 240, seed=0)
    write_csv(data / "test.csv", ds.x_test, ds.y_test)
    assert main(["eval", "--model", str(out / "model.bin"), "--data", str(data)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["models"] == 2
    assert result["accuracy"] == pytest.approx(report["evaluation"]["accuracy"])

    assert main(["report", "--dir", str(tmp_path)]) == 0
    assert (tmp_path / "summary.csv").read_text().startswith("run,label")


def test_cl_run_and_eval(tmp_path, capsys):
    cfg = tmp_path / "cl.ini"
    cfg.write_text(CONFIG.replace("classes = 3", "classes = 4") + "[experiment]\nmode = cl\n[continual]\ntasks = 2\n")
    out = tmp_path / "cl"
    assert main(["cl-run", "--config", str(cfg), "--output", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["memory"]["binaries"] == 16 * 2

    data = tmp_path / "data"
    data.mkdir()
    ds = make_synthetic("spirals", 4, 240, seed=0)
    write_csv(data / "test.csv", ds.x_test, ds.y_test)
    assert main(["eval", "--model", str(out / "model.bin"), "--data", str(data)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["tasks"] == 2
    assert result["task_accuracy"][0] == pytest.approx(report["R"][1][0] * 100)


def test_sweep_alias(config, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(config), "--param", "p", "--values", "30,80", "--output", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("prune=30.0")
    assert (out / "prune=80.0" / "report.json").exists()


@pytest.mark.parametrize("argv", [
    ["train-ensemble", "--config", "missing.ini"],
    ["sweep", "--param", "colour", "--values", "1"],
])
def test_user_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_mode_mismatch(config, tmp_path):
    assert main(["cl-run", "--config", str(config), "--output", str(tmp_path)]) == 2


def test_stage_error_exit_3(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[model]\nbackbone = bogus(3)\n[data]\nsamples = 50\nclasses = 2\n")
    assert main(["train-ensemble", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 3
    assert "build" in capsys.readouterr().err
    assert (tmp_path / "o" / "partial.json").exists()


def test_corrupt_model(tmp_path):
    (tmp_path / "m.bin").write_bytes(b"nope")
    (tmp_path / "d").mkdir()
    write_csv(tmp_path / "d" / "test.csv", [[0.0, 0.0]], [0])
    assert main(["eval", "--model", str(tmp_path / "m.bin"), "--data", str(tmp_path / "d")]) == 2


def test_empty_report_dir(tmp_path):
    assert main(["report", "--dir", str(tmp_path)]) == 1
