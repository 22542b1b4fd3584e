import csv
import json

import numpy as np
import pytest

from iqn_rnn import autodiff as ad
from iqn_rnn import cli
from iqn_rnn.data import Dataset, TimeSeries, write_dataset
from iqn_rnn.forecaster import IqnRnn, ModelConfig, TrainResult, save_model

TINY = ["--gmm-num-series", "60", "--hidden-size", "8", "--num-layers", "1", "--batch-size", "16",
        "--batches-per-epoch", "2", "--n-cos", "8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "train"
    assert run("train", "--synth-gmm", "--epochs", 2, "--context", 15, "--pred", 2, "--out", out, *TINY) == 0
    return out


def echoed(path):
    return json.loads((path / "config.json").read_text())


def test_gmm_protocol_flags_echoed(tmp_path):
    out = tmp_path / "r"
    assert run("train", "--synth-gmm", "--epochs", 20, "--context", 15, "--pred", 2, "--out", out, *TINY) == 0
    cfg = echoed(out)
    assert cfg["model"]["epochs"] == 20
    assert cfg["model"]["context_length"] == 15
    assert cfg["model"]["prediction_length"] == 2
    assert cfg["data"]["gmm"]["length"] == 48
    assert cfg["data"]["windows"] == 1
    assert sorted(p.name for p in out.iterdir()) == ["config.json", "loss_trace.csv", "model.ckpt"]
    trace = (out / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,loss" and len(trace) == 21


def test_data_file_gets_table_defaults(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    ds = Dataset([TimeSeries(str(i), "2014-01-01", "hourly", rng.uniform(0, 5, 400), "positive")
                  for i in range(3)], 24)
    write_dataset(ds, tmp_path / "elec.jsonl")

    def fake_train(config, dataset):
        return TrainResult(IqnRnn(config), [], 0.0, [])

    monkeypatch.setattr(cli, "train", fake_train)
    out = tmp_path / "r"
    assert run("train", "--data", tmp_path / "elec.jsonl", "--domain", "positive", "--out", out) == 0
    m = echoed(out)["model"]
    assert (m["hidden_size"], m["num_layers"], m["dropout"]) == (64, 3, 0.2)
    assert (m["epochs"], m["learning_rate"], m["batch_size"], m["batches_per_epoch"]) == (10, 1e-3, 256, 120)
    assert (m["prediction_length"], m["context_length"]) == (24, 48)
    assert echoed(out)["data"]["windows"] == 7


def test_missing_file_leaves_nothing(tmp_path, capsys):
    out = tmp_path / "r"
    code = run("train", "--data", tmp_path / "absent.jsonl", "--out", out)
    assert code == cli.EXIT_DATA
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []
    assert "not found" in capsys.readouterr().err


def test_failure_midway_leaves_nothing(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"start": "2020-01-01", "freq": "hourly", "target": [1, 2]}\n{oops\n')
    assert run("train", "--data", tmp_path / "bad.jsonl", "--out", tmp_path / "r") == cli.EXIT_DATA
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.jsonl"]


def test_config_error_exit(tmp_path):
    assert run("train", "--synth-gmm", "--dropout", 1.5, "--out", tmp_path / "r") == cli.EXIT_CONFIG
    assert run("train", "--out", tmp_path / "r") == cli.EXIT_CONFIG
    assert not (tmp_path / "r").exists()


def test_refuses_non_empty_output(tmp_path, trained):
    assert run("train", "--synth-gmm", "--out", trained, *TINY) == cli.EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit(tmp_path):
    huge = Dataset([TimeSeries("0", "2020-01-01", "hourly", np.full(40, 1.7e308))], 2)
    write_dataset(huge, tmp_path / "huge.jsonl")
    code = run("train", "--data", tmp_path / "huge.jsonl", "--pred", 2, "--windows", 1, "--epochs", 1,
               "--hidden-size", 8, "--num-layers", 1, "--batch-size", 4, "--batches-per-epoch", 1,
               "--out", tmp_path / "r")
    assert code == cli.EXIT_NUMERIC
    assert not (tmp_path / "r").exists()


def test_evaluate_after_gmm_training(tmp_path, trained):
    out = tmp_path / "eval"
    assert run("evaluate", "--run", trained, "--num-samples", 40, "--out", out) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    for key in ("crps", "msis", "smape", "mase", "ql50", "ql90", "nrmse"):
        assert np.isfinite(metrics[key])
    text = dict(line.split("=", 1) for line in (out / "metrics.txt").read_text().splitlines())
    assert float(text["crps"]) == metrics["crps"]
    with open(out / "metrics_per_series.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 60
    with open(out / "quantile_function.csv") as fh:
        dump = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    assert [r["tau"] for r in dump] == [round(0.01 * k, 2) for k in range(1, 100)]
    assert all(a["q_hat"] <= b["q_hat"] for a, b in zip(dump, dump[1:]))
    assert all(a["q_true"] < b["q_true"] for a, b in zip(dump, dump[1:]))


def test_checkpoint_mismatch(tmp_path, trained):
    assert run("evaluate", "--run", trained, "--hidden-size", 16, "--out", tmp_path / "e") == cli.EXIT_CONFIG
    assert not (tmp_path / "e").exists()


def test_forecast_outputs(tmp_path, trained):
    out = tmp_path / "f"
    assert run("forecast", "--run", trained, "--num-samples", 5, "--out", out) == 0
    lines = (out / "forecasts.csv").read_text().splitlines()
    assert lines[0] == "series_id,sample,step,value"
    assert len(lines) == 1 + 60 * 5 * 2
    q = (out / "quantiles.csv").read_text().splitlines()
    assert q[1].startswith("0,0,2020-01-03T00:00:00,0.05,")


def test_oracle_checkpoint_scores_zero(tmp_path):
    # history varies, the last two windows sit at a constant the oracle emits exactly
    rng = np.random.default_rng(0)
    values = [np.concatenate([rng.normal(size=40), np.full(4, 2.5)]) for _ in range(3)]
    ds = Dataset([TimeSeries(str(i), "2020-01-01", "hourly", v) for i, v in enumerate(values)], 2)
    write_dataset(ds, tmp_path / "d.jsonl")
    cfg = ModelConfig(prediction_length=2, context_length=4, hidden_size=4, num_layers=1, n_cos=4, dtype="float64")
    model = IqnRnn(cfg)
    for p in model.parameters():
        p.data[...] = 0.0
    model.head.generator.out.bias.data[...] = 2.5
    save_model(model, tmp_path / "oracle.ckpt")
    out = tmp_path / "e"
    assert run("evaluate", "--data", tmp_path / "d.jsonl", "--pred", 2, "--windows", 2,
               "--checkpoint", tmp_path / "oracle.ckpt", "--hidden-size", 4, "--num-layers", 1,
               "--n-cos", 4, "--out", out) == 0
    m = json.loads((out / "metrics.json").read_text())
    for key in ("crps", "ql50", "ql90", "msis", "nrmse", "smape", "mase", "crps_energy"):
        assert m[key] == 0.0, key


def test_replay_reproduces_outputs(tmp_path, trained):
    again = tmp_path / "again"
    assert run("train", "--config", trained / "config.json", "--out", again) == 0
    assert (again / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()
    assert (again / "loss_trace.csv").read_text() == (trained / "loss_trace.csv").read_text()
    assert echoed(again) == echoed(trained)
    e1, e2 = tmp_path / "e1", tmp_path / "e2"
    assert run("evaluate", "--run", trained, "--num-samples", 20, "--out", e1) == 0
    assert run("evaluate", "--run", again, "--num-samples", 20, "--out", e2) == 0
    for name in ("metrics.json", "metrics.txt", "metrics_per_series.csv", "quantile_function.csv"):
        assert (e1 / name).read_bytes() == (e2 / name).read_bytes()


def test_default_output_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "root"))
    assert run("gradcheck", "--seed", 1) == 0
    (only,) = list((tmp_path / "root").iterdir())
    assert only.name.startswith("gradcheck-") and only.name.endswith("seed1")
    report = json.loads((only / "gradcheck.json").read_text())
    assert report["passed"] and report["max_rel_error"] < 1e-4


def test_synth_writes_dataset(tmp_path):
    out = tmp_path / "s"
    assert run("synth", "--synth-gmm", "--gmm-num-series", 4, "--gmm-length", 10, "--seed", 3, "--out", out) == 0
    lines = (out / "dataset.jsonl").read_text().splitlines()
    assert len(lines) == 4 and len(json.loads(lines[0])["target"]) == 10


@pytest.mark.parametrize("seed", [0, 1])
def test_gradcheck_passes(tmp_path, seed, capsys):
    assert run("gradcheck", "--seed", seed, "--out", tmp_path / "g") == 0
    assert "pass" in capsys.readouterr().out


def test_gradcheck_negative_control(tmp_path, monkeypatch, capsys):
    real = ad.sigmoid

    def broken_sigmoid(x):
        out = real(x)
        inner = out._backward
        if inner is not None:
            out._backward = lambda g: tuple(0.9 * v for v in inner(g))
        return out

    monkeypatch.setattr(ad, "sigmoid", broken_sigmoid)
    assert run("gradcheck", "--out", tmp_path / "g") == cli.EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out
    assert not (tmp_path / "g").exists()
