import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from switchpol.cli import main
from switchpol.core import PolicyParams, Trajectory
from switchpol.datagen import write_trajectory


def _write(path, doc):
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))
    return str(path)


def _snapshot(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(Path(d).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = _write(root / "gen.yaml", {"seed": 3, "output_dir": "data",
                                     "scenario": {"suite": "lane-change", "split": [2, 1, 1], "T": 150}})
    assert main(["gen-data", gen]) == 0
    train = _write(root / "train.yaml", {"output_dir": "model", "data": {"dataset": "data/dataset.json"},
                                         "fit": {"d": 2, "n_starts": 1, "max_iters": 15}})
    assert main(["train", train]) == 0
    return root


def test_gen_data_file_set(workdir):
    names = {p.name for p in (workdir / "data").iterdir()}
    expected = {"track.json", "generator.json", "dataset.json", "manifest.json"}
    for split, n in (("train", 2), ("val", 1), ("test", 1)):
        for i in range(n):
            expected |= {f"{split}_{i:02d}.csv", f"{split}_{i:02d}.json"}
    assert expected <= names
    ds = json.loads((workdir / "data" / "dataset.json").read_text())
    assert ds["train"] == ["train_00.csv", "train_01.csv"]


def test_gen_data_deterministic(workdir, capsys):
    before = _snapshot(workdir / "data")
    assert main(["gen-data", str(workdir / "gen.yaml")]) == 0
    after = _snapshot(workdir / "data")
    assert before.keys() == after.keys()
    assert all(before[k] == after[k] for k in before)
    out = json.loads(capsys.readouterr().out)
    assert out["seeds"]["train_00.csv"] == 3


def test_bad_config_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.yaml", {"fit": {"dd": 0}})
    assert main(["train", cfg]) == 2
    assert "fit.dd" in capsys.readouterr().err
    cfg = _write(tmp_path / "bad2.yaml", {"fit": {"d": 0}, "data": {"dataset": "x.json"}})
    assert main(["train", cfg]) == 2
    (tmp_path / "broken.yaml").write_text("seed: [1, 2\n")
    assert main(["gen-data", str(tmp_path / "broken.yaml")]) == 2
    assert main(["gen-data", str(tmp_path / "missing.yaml")]) == 2


def test_estimate_inputs(workdir, tmp_path, capsys):
    assert main(["estimate-inputs", str(workdir / "data" / "train_00.csv"), "-o", str(tmp_path / "u.csv")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["max_input_error"] <= 1e-8
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "t,a,delta,residual" and len(lines) == 150
    write_trajectory(Trajectory(np.tile([0.0, 0, 0, 10, 0, 0], (2, 1)), 0.05), tmp_path / "short.csv")
    lines = (tmp_path / "short.csv").read_text().splitlines()
    (tmp_path / "short.csv").write_text("\n".join(lines[:2]) + "\n")
    assert main(["estimate-inputs", str(tmp_path / "short.csv")]) == 2


def test_estimate_inputs_infeasible(tmp_path, capsys):
    X = np.array([[0, 0, 0, 10.0, 0, 0], [0.5, 0, 0, 10.0, 0, 0], [1.0, 0, 0, 10.0, 0, 50.0]])
    write_trajectory(Trajectory(X, 0.05), tmp_path / "bad.csv")
    assert main(["estimate-inputs", str(tmp_path / "bad.csv")]) == 4
    assert "t=1" in capsys.readouterr().err


def test_train_outputs_and_determinism(workdir):
    model = workdir / "model"
    assert {"model.json", "report.json", "trace.csv", "manifest.json"} <= {p.name for p in model.iterdir()}
    first = (model / "model.json").read_bytes()
    assert main(["train", str(workdir / "train.yaml")]) == 0
    assert (model / "model.json").read_bytes() == first
    rep = json.loads((model / "report.json").read_text())
    assert np.all(np.diff(rep["trace"]) <= 1e-9)
    assert PolicyParams.load(model / "model.json").d == 2


def test_train_single_mode(workdir):
    cfg = _write(workdir / "train1.yaml", {"output_dir": "model1", "data": {"dataset": "data/dataset.json"},
                                           "fit": {"d": 1}})
    assert main(["train", cfg]) == 0
    rep = json.loads((workdir / "model1" / "report.json").read_text())
    assert len(rep["trace"]) <= 2


def test_evaluate_predict_plot(workdir, capsys):
    cfg = _write(workdir / "eval.yaml", {"output_dir": "eval", "data": {"dataset": "data/dataset.json"},
                                         "methods": {"general": "model/model.json", "truth": "data/generator.json",
                                                     "CC": "CC"},
                                         "prediction": {"n_samples": 10}})
    assert main(["evaluate", cfg]) == 0
    text = capsys.readouterr().out
    assert all(m in text for m in ("general", "truth", "CC"))
    metrics = json.loads((workdir / "eval" / "metrics.json").read_text())
    assert metrics["methods"] == ["general", "truth", "CC"] and len(metrics["mean"][0]) == 6
    cfg = _write(workdir / "pred.yaml", {"output_dir": "pred", "data": {"dataset": "data/dataset.json"},
                                         "model": "model/model.json", "prediction": {"n_samples": 5},
                                         "improper_init": {"u0": [-0.05, -0.01]}})
    assert main(["predict", cfg]) == 0
    assert (workdir / "pred" / "predict_00.csv").exists()
    assert main(["plot", str(workdir / "eval" / "plot_general.csv")]) == 0
    assert (workdir / "eval" / "plot_general.svg").read_text().lstrip().startswith("<?xml")


def test_plot_missing_input(tmp_path):
    assert main(["plot", str(tmp_path / "nope.csv")]) == 2


def test_unknown_command():
    assert main(["dance"]) == 2


def test_train_stable_writes_certificate(workdir):
    cfg = _write(workdir / "train_s.yaml", {"output_dir": "model_s", "data": {"dataset": "data/dataset.json"},
                                            "fit": {"d": 2, "stability": True, "max_iters": 5}})
    assert main(["train", cfg]) == 0
    cert = json.loads((workdir / "model_s" / "report.json").read_text())["certificate"]
    assert min(cert["block_margins"]) >= cert["eps"] and max(cert["direct_margins"]) < 0


@pytest.mark.parametrize("path", sorted(Path(__file__).resolve().parents[1].glob("configs/*.yaml")))
def test_shipped_configs_validate(path):
    from switchpol.cli import RunConfig
    cfg = RunConfig(path)
    assert cfg.fit.d >= 1 and cfg.prediction.horizon >= 1
