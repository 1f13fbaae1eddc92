import csv
import json
from pathlib import Path

import pytest

from koopnav import __version__
from koopnav import koopman as kp
from koopnav.cli import BenchmarkConfig, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMALL_TRAIN = {"n_traj": 20, "n_steps": 50, "holdout_traj": 5, "holdout_steps": 50, "seed": 4}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    cfg = write(d / "train.json", {"n_traj": 200, "n_steps": 200, "holdout_traj": 10, "seed": 1})
    out = d / "model.json"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    return out


def test_train_writes_self_describing_model(model_file):
    d = json.loads(model_file.read_text())
    assert d["format"] == kp.FORMAT
    meta = d["training_meta"]
    assert meta["n_traj"] == 200 and meta["seed"] == 1 and meta["lambda"] == 0.0
    assert 0 < meta["holdout_rmse_percent"] < 10


def test_train_is_byte_identical(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", SMALL_TRAIN)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a.json")]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert "RMSE" in capsys.readouterr().out


def test_train_seed_override_changes_model(tmp_path):
    cfg = write(tmp_path / "c.json", SMALL_TRAIN)
    main(["train", "--config", cfg, "--out", str(tmp_path / "a.json")])
    main(["train", "--config", cfg, "--seed", "99", "--lambda", "0.05", "--out", str(tmp_path / "b.json")])
    meta = json.loads((tmp_path / "b.json").read_text())["training_meta"]
    assert meta["seed"] == 99 and meta["lambda"] == 0.05
    assert (tmp_path / "a.json").read_bytes() != (tmp_path / "b.json").read_bytes()


@pytest.mark.parametrize(
    "cfg",
    [{"n_traj": 0}, {"n_steps": -3}, {"lambda": -0.1}, {"control_box": [1, -1, -1, 1]}, {"bogus": 1}],
)
def test_train_rejects_bad_config(tmp_path, capsys, cfg):
    path = write(tmp_path / "c.json", cfg)
    assert main(["train", "--config", path, "--out", str(tmp_path / "m.json")]) == 1
    assert "invalid configuration" in capsys.readouterr().err
    assert not (tmp_path / "m.json").exists()


def test_train_unwritable_output(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", SMALL_TRAIN)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "missing" / "m.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_predict_csv(model_file, tmp_path, capsys):
    out = tmp_path / "p.csv"
    cfg = write(tmp_path / "p.json", {"steps": 30, "x0": [0.1, 0.2, 0.3]})
    assert main(["predict", "--config", cfg, "--model", str(model_file), "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["t", "x", "y", "psi", "x_pred", "y_pred", "psi_pred", "v", "omega"]
    assert len(rows) == 32
    assert rows[1][1:4] == rows[1][4:7]  # both start at the true x0
    assert rows[-1][7:] == ["", ""]
    assert "RMSE" in capsys.readouterr().out


def test_predict_malformed_model(tmp_path, capsys):
    bad = write(tmp_path / "m.json", {"format": kp.FORMAT, "A": [[1]]})
    assert main(["predict", "--model", bad, "--out", str(tmp_path / "p.csv")]) == 1
    assert "missing fields" in capsys.readouterr().err


def test_navigate_reaches_open_field(model_file, tmp_path, capsys):
    scen = write(tmp_path / "s.json", {"start": [0, 0, 0], "goal": [0.5, 0.3, 0], "obstacles": []})
    out = tmp_path / "traj.csv"
    code = main(["navigate", "--model", str(model_file), "--scenario", scen, "--out", str(out)])
    assert code == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("reached method=k-nmpc") and "\n" not in line
    assert open(out).readline().strip() == "t,x,y,psi,v,omega"


def test_navigate_nominal_baseline_collides(tmp_path, capsys):
    assert main(["navigate", "--method", "nominal", "--lambda", "0.05", "--seed", "0"]) == 2
    assert capsys.readouterr().out.startswith("collided method=nmpc")


def test_navigate_timeout(tmp_path):
    scen = write(tmp_path / "s.json", {"start": [0, 0, 0], "goal": [1.5, 1.5, 0], "obstacles": [], "max_sim_time": 0.3})
    assert main(["navigate", "--method", "nominal", "--scenario", scen]) == 3


def test_navigate_missing_scenario(model_file, tmp_path, capsys):
    assert main(["navigate", "--model", str(model_file), "--scenario", str(tmp_path / "nope.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_navigate_malformed_model(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text("{ this is not json")
    assert main(["navigate", "--model", str(bad)]) == 1
    assert "not valid JSON" in capsys.readouterr().err


def test_navigate_koopman_needs_model(capsys):
    assert main(["navigate"]) == 1
    assert "needs a model" in capsys.readouterr().err


def bench_config(tmp_path, **over):
    cfg = {
        "scenario": write(tmp_path / "s.json", {"start": [0, 0, 0], "goal": [0.4, 0.2, 0], "obstacles": [{"cx": 0.2, "cy": -0.3, "radius": 0.1}]}),
        "lambdas": [0.0],
        "trials": 2,
        "training": SMALL_TRAIN,
        "generalization": [{"train_lambda": 0.0, "deploy_lambdas": [0.05]}],
    }
    cfg.update(over)
    return write(tmp_path / "b.json", cfg)


def test_benchmark_end_to_end(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["benchmark", "--config", bench_config(tmp_path), "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "stats.csv")))
    assert rows[0] == ["method", "lambda", "trials", "collisions", "avg_success_s", "avg_failure_s"]
    assert [r[0] for r in rows[1:]] == ["nmpc", "k-nmpc", "k-nmpc(train=0)"]
    meta = json.loads((out / "benchmark.json").read_text())
    assert meta["koopnav_version"] == __version__
    assert (out / "models" / "model_lambda0.json").exists()
    assert len(list((out / "trials").glob("*.csv"))) == 6
    assert not (out / "FAILED").exists()
    first = (out / "stats.csv").read_bytes()
    assert main(["benchmark", "--config", bench_config(tmp_path), "--out", str(out)]) == 0
    assert (out / "stats.csv").read_bytes() == first


def test_benchmark_empty_lambda_list(tmp_path, capsys):
    assert main(["benchmark", "--config", bench_config(tmp_path, lambdas=[]), "--out", str(tmp_path / "o")]) == 1
    assert "lambdas" in capsys.readouterr().err


def test_benchmark_missing_model_leaves_failed_marker(tmp_path, capsys):
    cfg = bench_config(tmp_path, auto_train=False, methods=["k-nmpc"], generalization=[])
    out = tmp_path / "o"
    assert main(["benchmark", "--config", cfg, "--out", str(out)]) == 1
    assert "k-nmpc" in (out / "FAILED").read_text()
    assert "k-nmpc" in capsys.readouterr().err


def test_sweep_config_shapes():
    cfg = BenchmarkConfig.model_validate(json.loads((CONFIGS / "lambda_sweep.json").read_text()))
    assert len(cfg.conditions()) == 16
    gen = BenchmarkConfig.model_validate(json.loads((CONFIGS / "generalization.json").read_text()))
    assert [c.label for c in gen.conditions()] == ["k-nmpc", "k-nmpc(train=0.1)", "k-nmpc(train=0.1)"]


def test_bad_jobs(tmp_path):
    assert main(["benchmark", "--config", bench_config(tmp_path), "--out", str(tmp_path / "o"), "--jobs", "0"]) == 1
