"""Command-line runs: ``synth``, ``train``, ``forecast``, ``evaluate``, ``gradcheck``.

Every invocation writes into one run directory (``--out``, or a fresh
directory under ``$IQN_RNN_OUTPUT_DIR`` / ``./runs``). Outputs are staged in a
temporary sibling and renamed into place only on success, so a failed run
leaves nothing behind. ``config.json`` in the run directory records the fully
resolved configuration; ``--config run/config.json`` replays it.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .data import DataError, GmmSpec, generate_gmm, gmm_true_quantile, load_dataset, split, write_dataset
from .evaluation import SEASONALITY, MetricsError, backtest
from .forecaster import (
    ModelConfig,
    empirical_quantiles,
    gradient_check,
    load_model,
    sample_forecasts,
    save_model,
    train,
    write_forecasts,
)

log = logging.getLogger("iqn_rnn")

OUTPUT_ENV = "IQN_RNN_OUTPUT_DIR"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
GRADCHECK_TOL = 1e-4
DUMP_TAUS = np.round(np.arange(1, 100) / 100, 2)
DEFAULT_WINDOWS = {"hourly": 7, "daily": 5}


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# -- argument parsing -------------------------------------------------------------

# ModelConfig fields settable from the command line; freq and domain follow the data
_MODEL_FLAGS = {
    "prediction_length": (int, ["--pred"]),
    "context_length": (int, ["--context"]),
    "hidden_size": (int, []),
    "num_layers": (int, []),
    "dropout": (float, []),
    "epochs": (int, []),
    "learning_rate": (float, ["--lr"]),
    "batch_size": (int, []),
    "batches_per_epoch": (int, []),
    "num_parallel_samples": (int, []),
    "n_cos": (int, []),
    "scaling": (str, []),
    "dtype": (str, []),
}

_GMM_FLAGS = {
    "weights": "--gmm-weights",
    "means": "--gmm-means",
    "stds": "--gmm-stds",
    "num_series": "--gmm-num-series",
    "length": "--gmm-length",
}


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--data", help="JSON-lines or CSV dataset file")
    src.add_argument("--synth-gmm", action="store_true", default=None,
                     help="generate the Gaussian-mixture dataset instead of reading a file")
    g.add_argument("--format", choices=["jsonlines", "csv"], help="dataset format (default: from suffix)")
    g.add_argument("--freq", help="frequency for records that omit it (hourly or daily)")
    g.add_argument("--domain", choices=["real", "positive", "unit_interval", "count"])
    g.add_argument("--gmm-weights", type=_float_list)
    g.add_argument("--gmm-means", type=_float_list)
    g.add_argument("--gmm-stds", type=_float_list)
    g.add_argument("--gmm-num-series", type=int)
    g.add_argument("--gmm-length", type=int)
    g.add_argument("--windows", type=int, help="rolling test windows held out (default 7 hourly, 5 daily, 1 GMM)")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    for name, (typ, aliases) in _MODEL_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), *aliases, dest=name, type=typ)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="replay a config.json written by an earlier run; flags override it")
    p.add_argument("--out", help=f"run directory (default: fresh directory under ${OUTPUT_ENV} or ./runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iqn-rnn", description="IQN-RNN probabilistic forecaster")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a Gaussian-mixture dataset")
    _add_common(p)
    _add_data_args(p)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    _add_data_args(p)
    _add_model_args(p)

    for name, text in (("forecast", "sample forecasts past the end of every series"),
                       ("evaluate", "rolling-window backtest with metric report")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        _add_data_args(p)
        _add_model_args(p)
        p.add_argument("--run", help="training run directory (supplies config.json and model.ckpt)")
        p.add_argument("--checkpoint", help="checkpoint file (default: <run>/model.ckpt)")
        p.add_argument("--num-samples", type=int, help="sample paths per series (default num_parallel_samples)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    _add_common(p)
    return parser


# -- configuration resolution -------------------------------------------------------

def _read_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, a replayed config and explicit flags into one RunConfig dict."""
    base: dict = {}
    if getattr(args, "run", None):
        base = _read_config(Path(args.run) / "config.json")
    if args.config:
        base = _read_config(args.config)
    data = dict(base.get("data", {}))
    model = dict(base.get("model", {}))
    seed = args.seed if args.seed is not None else base.get("seed", 0)

    run = {"command": args.command, "seed": seed}
    if args.command == "gradcheck":
        return run

    if args.data is not None:
        data = {"source": "file", "path": str(Path(args.data).resolve())}
    elif args.synth_gmm:
        data = {"source": "gmm"}
    if not data:
        raise ConfigError("no dataset: pass --data PATH or --synth-gmm")
    if data["source"] == "gmm":
        gmm = {k: v for k, v in data.get("gmm", {}).items()}
        for key, flag in _GMM_FLAGS.items():
            value = getattr(args, flag[2:].replace("-", "_"))
            if value is not None:
                gmm[key] = value
        defaults = GmmSpec()
        for f in fields(GmmSpec):
            gmm.setdefault(f.name, list(getattr(defaults, f.name)) if f.name in ("weights", "means", "stds")
                           else getattr(defaults, f.name))
        data["gmm"] = gmm
        data.setdefault("freq", "hourly")
        data["domain"] = "real"
    else:
        for key in ("format", "freq", "domain"):
            if getattr(args, key) is not None:
                data[key] = getattr(args, key)
        data.setdefault("domain", "real")
    if args.windows is not None:
        data["windows"] = args.windows
    run["data"] = data

    if args.command != "synth":
        for name in _MODEL_FLAGS:
            value = getattr(args, name, None)
            if value is not None:
                model[name] = value
        model["seed"] = seed
        run["model"] = model
    for key in ("checkpoint", "num_samples"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = str(Path(value).resolve()) if key == "checkpoint" else value
    if getattr(args, "run", None) and "checkpoint" not in run:
        run["checkpoint"] = str((Path(args.run) / "model.ckpt").resolve())
    return run


def _gmm_spec(data: dict, prediction_length: int | None = None) -> GmmSpec:
    g = data["gmm"]
    try:
        return GmmSpec(tuple(g["weights"]), tuple(g["means"]), tuple(g["stds"]), int(g["num_series"]),
                       int(g["length"]), prediction_length or g.get("prediction_length", 2))
    except ValueError as exc:
        raise ConfigError(f"GMM spec: {exc}") from None


def load_data(run: dict):
    """Materialize the dataset and fill in data-dependent defaults in ``run``."""
    data = run["data"]
    pred = run.get("model", {}).get("prediction_length")
    if data["source"] == "gmm":
        spec = _gmm_spec(data, pred)
        data["gmm"]["prediction_length"] = spec.prediction_length
        ds = generate_gmm(spec, seed=run["seed"])
        data.setdefault("windows", 1)
    else:
        ds = load_dataset(data["path"], data.get("format"), pred, data.get("freq"), data["domain"])
        data["freq"] = ds.freq
        data.setdefault("windows", DEFAULT_WINDOWS[ds.freq])
    if data["windows"] < 1:
        raise ConfigError("--windows must be >= 1")
    if "model" in run:
        model = run["model"]
        model.setdefault("prediction_length", ds.prediction_length)
        model["freq"] = ds.freq
        model["domain"] = ds.domain
        ds.prediction_length = model["prediction_length"]
    return ds


def model_config(run: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(run["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model config: {exc}") from None


# -- run directory ------------------------------------------------------------------

class RunDir:
    """Stage outputs in a temporary sibling; publish by rename on success."""

    def __init__(self, target: Path):
        self.target = target
        if target.exists() and any(target.iterdir()):
            raise ConfigError(f"output directory {target} exists and is not empty")
        target.parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))

    def commit(self) -> Path:
        if self.target.exists():
            self.target.rmdir()
        self.path.rename(self.target)
        return self.target

    def abort(self) -> None:
        shutil.rmtree(self.path, ignore_errors=True)


def _target_dir(args, command: str, seed: int) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUTPUT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    target = root / f"{command}-{stamp}-seed{seed}"
    k = 1
    while target.exists():
        k += 1
        target = root / f"{command}-{stamp}-seed{seed}-{k}"
    return target


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------------

def cmd_synth(run: dict, out: Path) -> None:
    ds = load_data(run)
    write_dataset(ds, out / "dataset.jsonl")
    print(f"wrote {len(ds)} series")


def cmd_train(run: dict, out: Path) -> None:
    ds = load_data(run)
    cfg = model_config(run)
    run["model"] = cfg.to_dict()
    train_ds, _ = split(ds, run["data"]["windows"])
    result = train(cfg, train_ds)
    save_model(result.model, out / "model.ckpt")
    with open(out / "loss_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(result.loss_trace, 1):
            fh.write(f"{i},{loss!r}\n")
    if result.skipped:
        (out / "skipped_series.txt").write_text("\n".join(result.skipped) + "\n")
    final = result.loss_trace[-1] if result.loss_trace else float("nan")
    print(f"trained {cfg.epochs} epochs in {result.seconds:.1f}s; final loss {final:.5f}")


def _load_for_inference(run: dict):
    if "checkpoint" not in run:
        raise ConfigError("no checkpoint: pass --checkpoint PATH or --run DIR")
    ckpt = Path(run["checkpoint"])
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    ds = load_data(run)
    expect = model_config(run)
    try:
        model = load_model(ckpt, expect=expect)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if model.config.freq != ds.freq:
        raise ConfigError(f"checkpoint freq={model.config.freq!r} does not match dataset freq={ds.freq!r}")
    # horizon and context are properties of the trained model
    run["model"] = model.config.to_dict()
    ds.prediction_length = model.config.prediction_length
    return model, ds


def _rng(run: dict, stream: int) -> np.random.Generator:
    return np.random.default_rng([run["seed"], stream])


def cmd_forecast(run: dict, out: Path) -> None:
    model, ds = _load_for_inference(run)
    forecasts = sample_forecasts(model, [s.values for s in ds], [s.start for s in ds], [s.id for s in ds],
                                 run.get("num_samples"), _rng(run, 3))
    write_forecasts(forecasts, out / "forecasts.csv")
    with open(out / "quantiles.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["series_id", "step", "timestamp", "tau", "value"])
        taus = [0.05, 0.1, 0.5, 0.9, 0.95]
        for fs in forecasts:
            q = empirical_quantiles(fs, taus)
            stamps = fs.timestamps()
            for k in range(fs.horizon):
                for i, t in enumerate(taus):
                    w.writerow([fs.series_id, k, stamps[k].isoformat(), t, repr(float(q[i, k]))])
    print(f"wrote forecasts for {len(forecasts)} series")


def cmd_evaluate(run: dict, out: Path) -> None:
    model, ds = _load_for_inference(run)
    captured = []

    def forecast_fn(histories, starts, ids):
        fs = sample_forecasts(model, histories, starts, ids, run.get("num_samples"), _rng(run, 4))
        captured.extend(fs)
        return fs

    report = backtest(model, ds, run["data"]["windows"], seasonality=SEASONALITY[ds.freq],
                      forecast_fn=forecast_fn)
    report.write_json(out / "metrics.json")
    report.write_text(out / "metrics.txt")
    report.write_per_series_csv(out / "metrics_per_series.csv")
    if run["data"]["source"] == "gmm":
        spec = _gmm_spec(run["data"])
        pooled = np.concatenate([fs.samples[:, 0] for fs in captured])
        q_hat = empirical_quantiles(pooled[:, None], DUMP_TAUS)[:, 0]
        with open(out / "quantile_function.csv", "w", encoding="utf-8") as fh:
            fh.write("tau,q_hat,q_true\n")
            for t, qh in zip(DUMP_TAUS, q_hat):
                fh.write(f"{float(t)!r},{float(qh)!r},{gmm_true_quantile(spec, float(t))!r}\n")
    for key in report.METRICS:
        print(f"{key}={getattr(report, key):.6g}")


def cmd_gradcheck(run: dict, out: Path) -> None:
    err = gradient_check(run["seed"])
    passed = bool(err < GRADCHECK_TOL)
    _write_json(out / "gradcheck.json", {"seed": run["seed"], "max_rel_error": err,
                                         "tolerance": GRADCHECK_TOL, "passed": passed})
    print(f"gradcheck seed={run['seed']} max relative error {err:.3e} ({'pass' if passed else 'FAIL'})")
    if not passed:
        raise NumericalFailure(f"max relative error {err:.3e} exceeds {GRADCHECK_TOL:g}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    rundir = None
    try:
        run = resolve(args)
        target = _target_dir(args, args.command, run["seed"])
        if run.get("data", {}).get("source") == "file" and not Path(run["data"]["path"]).is_file():
            raise FileNotFoundError(f"dataset file not found: {run['data']['path']}")
        rundir = RunDir(target)
        COMMANDS[args.command](run, rundir.path)
        # written last so that it reflects data-dependent defaults
        _write_json(rundir.path / "config.json", run)
        final = rundir.commit()
        rundir = None
        print(f"outputs in {final}")
        return EXIT_OK
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (DataError, MetricsError, ContractError, FileNotFoundError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except (NumericalFailure, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except ValueError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    finally:
        if rundir is not None:
            rundir.abort()
    print(f"iqn-rnn: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
