import csv
import json
import subprocess
import sys

import pytest

from barriernet import cli
from barriernet.net import load_checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    tcfg = root / "train.json"
    tcfg.write_text(json.dumps({"hidden": [16, 16], "stride": 4}))
    assert cli.main(["generate", "--scenario", "merging", "--count", "4", "--seed", "3", "--out", str(root / "data")]) == 0
    return root, tcfg


def read_loss(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_writes_manifest(workspace):
    root, _ = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["count"] == 4 and len(list((root / "data").glob("traj_*.csv"))) == 4


def test_generate_zero_count(tmp_path):
    assert cli.main(["generate", "--scenario", "nav2d", "--count", "0", "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "manifest.json").read_text())["trajectories"] == []


def test_missing_scenario_file(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.main(["generate", "--scenario", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_invalid_scenario_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scenario": "nav2d", "dt": -1}))
    assert cli.main(["generate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_train_and_resume(workspace):
    root, tcfg = workspace
    run = root / "bn"
    args = ["train", "--data", str(root / "data"), "--config", str(tcfg), "--out", str(run)]
    assert cli.main(args + ["--epochs", "3"]) == 0
    rows = read_loss(run / "loss.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    for name in ("model.json", "config.json", "summary.json"):
        assert (run / name).exists()
    _, extra = load_checkpoint(run / "model.json")
    assert extra["kind"] == "barriernet" and extra["epoch"] == 3

    run2 = root / "bn2"
    assert cli.main(["train", "--data", str(root / "data"), "--config", str(tcfg), "--epochs", "2",
                     "--resume", str(run / "model.json"), "--out", str(run2)]) == 0
    rows2 = read_loss(run2 / "loss.csv")
    assert [int(r["epoch"]) for r in rows2] == [1, 2, 3, 4, 5]
    assert rows2[:3] == rows


def test_train_fc_and_eval(workspace):
    root, tcfg = workspace
    assert cli.main(["train", "--data", str(root / "data"), "--model", "fc", "--config", str(tcfg),
                     "--epochs", "2", "--out", str(root / "fc")]) == 0
    if not (root / "bn" / "model.json").exists():
        assert cli.main(["train", "--data", str(root / "data"), "--config", str(tcfg), "--epochs", "2",
                         "--out", str(root / "bn")]) == 0
    out = root / "ev"
    rc = cli.main(["eval", "--scenario", "merging", "--model", str(root / "bn" / "model.json"),
                   "--model", str(root / "fc" / "model.json"), "--models", "barriernet,dfb,fc",
                   "--sweep", "phi=1.8,2.0", "--count", "2", "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert set(doc["models"]) == {"barriernet", "dfb", "fc"}
    assert set(doc["models"]["barriernet"]) == {"phi=1.8", "phi=2"}
    s = doc["models"]["barriernet"]["phi=1.8"]["summary"]
    assert s["rollouts"] == 2 and 0 < s["mean_solve_us"] < 10_000
    assert len(list((out / "trajectories").glob("*.csv"))) == 12


def test_eval_missing_model_kind(workspace):
    root, _ = workspace
    assert cli.main(["eval", "--scenario", "merging", "--models", "barriernet", "--count", "1",
                     "--out", str(root / "x")]) == 2


def test_train_bad_inputs(tmp_path, workspace):
    root, _ = workspace
    assert cli.main(["train", "--data", str(tmp_path / "none")]) == 2
    assert cli.main(["train", "--data", str(root / "data"), "--model", "rnn", "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["train", "--data", str(root / "data"), "--epochs", "-1", "--out", str(tmp_path / "r")]) == 2


def test_rollout_writes_csv(tmp_path):
    assert cli.main(["rollout", "--scenario", "nav3d", "--seed", "2", "--out", str(tmp_path)]) == 0
    header = (tmp_path / "rollout_expert.csv").read_text().splitlines()[0]
    assert "b_superquadric" in header
    assert json.loads((tmp_path / "rollout_expert.json").read_text())["min_b"] >= 0


def test_gradcheck_small(tmp_path, capsys):
    assert cli.main(["gradcheck", "--count", "40", "--seed", "5", "--out", str(tmp_path / "g.json")]) == 0
    rep = json.loads((tmp_path / "g.json").read_text())
    assert rep["verdict"] == "pass" and rep["checked"] == 40


def test_parse_sweep():
    assert cli.parse_sweep("R=6,7") == [{"R": 6.0}, {"R": 7.0}]
    assert cli.parse_sweep(None) == [{}]
    with pytest.raises(cli.UserError):
        cli.parse_sweep("R")


def test_threads_env(monkeypatch):
    monkeypatch.setenv("BARRIERNET_THREADS", "abc")
    with pytest.raises(cli.UserError):
        cli.worker_count()
    monkeypatch.setenv("BARRIERNET_THREADS", "1")
    assert cli.worker_count() == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "barriernet", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
