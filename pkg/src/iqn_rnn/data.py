"""Time series containers, ingestion, the Gaussian-mixture generator and splits."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtr

log = logging.getLogger(__name__)

__all__ = [
    "FREQS",
    "DataError",
    "TimeSeries",
    "Dataset",
    "GmmSpec",
    "load_dataset",
    "write_dataset",
    "generate_gmm",
    "gmm_cdf",
    "gmm_true_quantile",
    "split",
    "TestWindow",
]

FREQS = {"hourly": "h", "daily": "D"}
_FREQ_ALIASES = {"h": "hourly", "H": "hourly", "1H": "hourly", "1h": "hourly", "hour": "hourly",
                 "D": "daily", "d": "daily", "1D": "daily", "day": "daily"}
DOMAIN_NAMES = ("real", "positive", "unit_interval", "count")


class DataError(ValueError):
    """Input data violates the dataset contract."""


def _normalize_freq(freq: str) -> str:
    if freq in FREQS:
        return freq
    try:
        return _FREQ_ALIASES[freq]
    except KeyError:
        raise DataError(f"unsupported frequency {freq!r}; expected hourly or daily") from None


def _domain_violation(values: np.ndarray, domain: str) -> int | None:
    """Index of the first value outside ``domain``, or None."""
    if domain == "real":
        bad = ~np.isfinite(values)
    elif domain == "positive":
        bad = ~np.isfinite(values) | (values < 0)
    elif domain == "unit_interval":
        bad = ~np.isfinite(values) | (values < 0) | (values > 1)
    elif domain == "count":
        bad = ~np.isfinite(values) | (values < 0) | (values != np.round(values))
    else:
        raise DataError(f"unknown domain {domain!r}; expected one of {DOMAIN_NAMES}")
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else None


@dataclass
class TimeSeries:
    id: str
    start: pd.Timestamp
    freq: str
    values: np.ndarray
    domain: str = "real"

    def __post_init__(self):
        self.freq = _normalize_freq(self.freq)
        self.start = pd.Timestamp(self.start)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 1:
            raise DataError(f"series {self.id!r}: target must be a non-empty 1-d array")
        bad = _domain_violation(self.values, self.domain)
        if bad is not None:
            raise DataError(
                f"series {self.id!r}: value {self.values[bad]!r} at index {bad} "
                f"is outside the {self.domain} domain"
            )

    def __len__(self) -> int:
        return self.values.size

    def truncate(self, length: int) -> "TimeSeries":
        return TimeSeries(self.id, self.start, self.freq, self.values[:length], self.domain)


@dataclass
class Dataset:
    series: list[TimeSeries]
    prediction_length: int
    name: str = "dataset"

    def __post_init__(self):
        if not self.series:
            raise DataError(f"dataset {self.name!r} is empty")
        freqs = {s.freq for s in self.series}
        domains = {s.domain for s in self.series}
        if len(freqs) > 1:
            raise DataError(f"dataset {self.name!r} mixes frequencies {sorted(freqs)}")
        if len(domains) > 1:
            raise DataError(f"dataset {self.name!r} mixes domains {sorted(domains)}")
        if self.prediction_length < 1:
            raise DataError("prediction_length must be >= 1")

    @property
    def freq(self) -> str:
        return self.series[0].freq

    @property
    def domain(self) -> str:
        return self.series[0].domain

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self) -> Iterator[TimeSeries]:
        return iter(self.series)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.series[:n], self.prediction_length, f"{self.name}[:{n}]")


# -- ingestion ----------------------------------------------------------------

def load_dataset(
    path: str | Path,
    format: str | None = None,
    prediction_length: int | None = None,
    freq: str | None = None,
    domain: str = "real",
    name: str | None = None,
) -> Dataset:
    """Read a JSON-lines or CSV dataset.

    JSON lines: one object per line with ``start``, ``target`` and optional
    ``item_id``/``freq``. CSV: header ``id,start,freq,v0,v1,...``; trailing
    empty cells pad ragged series and are dropped.

    ``prediction_length`` defaults to 24 for hourly data and 30 for daily.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonlines"
    if format == "jsonlines":
        series = list(_read_jsonlines(path, freq, domain))
    elif format == "csv":
        series = list(_read_csv(path, freq, domain))
    else:
        raise DataError(f"unknown dataset format {format!r}")
    if not series:
        raise DataError(f"{path}: no series found (empty dataset)")
    if prediction_length is None:
        prediction_length = 24 if series[0].freq == "hourly" else 30
    return Dataset(series, prediction_length, name or path.stem)


def _read_jsonlines(path: Path, freq: str | None, domain: str) -> Iterator[TimeSeries]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            for key in ("start", "target"):
                if key not in rec:
                    raise DataError(f"{path}:{lineno}: missing field {key!r}")
            rec_freq = rec.get("freq", freq)
            if rec_freq is None:
                raise DataError(f"{path}:{lineno}: no frequency given (record or argument)")
            if freq is not None and _normalize_freq(rec_freq) != _normalize_freq(freq):
                raise DataError(f"{path}:{lineno}: frequency {rec_freq!r} differs from {freq!r}")
            target = rec["target"]
            if any(v is None for v in target):
                raise DataError(f"{path}:{lineno}: missing values are not supported")
            try:
                yield TimeSeries(
                    str(rec.get("item_id", lineno - 1)),
                    rec["start"],
                    rec_freq,
                    np.asarray(target, dtype=np.float64),
                    domain,
                )
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None


def _read_csv(path: Path, freq: str | None, domain: str) -> Iterator[TimeSeries]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if [h.strip() for h in header[:3]] != ["id", "start", "freq"]:
            raise DataError(f"{path}:1: header must begin with id,start,freq")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            cells = row[3:]
            while cells and cells[-1].strip() == "":
                cells.pop()
            if any(c.strip() == "" for c in cells):
                raise DataError(f"{path}:{lineno}: missing values are not supported")
            row_freq = row[2] or freq
            try:
                yield TimeSeries(row[0], row[1], row_freq, np.asarray(cells, dtype=np.float64), domain)
            except (DataError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None


def write_dataset(dataset: Dataset, path: str | Path, format: str = "jsonlines") -> None:
    path = Path(path)
    if format == "jsonlines":
        with open(path, "w", encoding="utf-8") as fh:
            for s in dataset:
                rec = {
                    "item_id": s.id,
                    "start": s.start.strftime("%Y-%m-%d %H:%M:%S"),
                    "freq": s.freq,
                    "target": s.values.tolist(),
                }
                fh.write(json.dumps(rec) + "\n")
    elif format == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            width = max(len(s) for s in dataset)
            w.writerow(["id", "start", "freq"] + [f"v{i}" for i in range(width)])
            for s in dataset:
                w.writerow([s.id, s.start.strftime("%Y-%m-%d %H:%M:%S"), s.freq] + [repr(float(v)) for v in s.values])
    else:
        raise DataError(f"unknown dataset format {format!r}")


# -- synthetic Gaussian mixture ---------------------------------------------------

@dataclass(frozen=True)
class GmmSpec:
    weights: tuple[float, ...] = (0.3, 0.4, 0.3)
    means: tuple[float, ...] = (-3.0, 0.0, 3.0)
    stds: tuple[float, ...] = (0.4, 0.4, 0.4)
    num_series: int = 10_000
    length: int = 48
    prediction_length: int = 2

    def __post_init__(self):
        if not (len(self.weights) == len(self.means) == len(self.stds)):
            raise ValueError("weights, means and stds must have equal length")
        if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if min(self.stds) <= 0:
            raise ValueError("component stds must be positive")


def generate_gmm(spec: GmmSpec = GmmSpec(), seed: int = 0) -> Dataset:
    """Series whose every value is an iid draw from the mixture."""
    rng = np.random.default_rng(seed)
    shape = (spec.num_series, spec.length)
    comp = rng.choice(len(spec.weights), size=shape, p=np.asarray(spec.weights))
    values = rng.normal(np.asarray(spec.means)[comp], np.asarray(spec.stds)[comp])
    start = pd.Timestamp("2020-01-01 00:00:00")
    series = [TimeSeries(str(i), start, "hourly", values[i], "real") for i in range(spec.num_series)]
    return Dataset(series, spec.prediction_length, "gmm")


def gmm_cdf(spec: GmmSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)[..., None]
    z = (x - np.asarray(spec.means)) / np.asarray(spec.stds)
    return (np.asarray(spec.weights) * ndtr(z)).sum(axis=-1)


def gmm_true_quantile(spec: GmmSpec, tau: float, tol: float = 1e-8) -> float:
    """Invert the mixture CDF by bisection to absolute tolerance ``tol``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie strictly inside (0, 1), got {tau}")
    lo = min(spec.means) - 40 * max(spec.stds)
    hi = max(spec.means) + 40 * max(spec.stds)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gmm_cdf(spec, mid) < tau:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- rolling split ------------------------------------------------------------------

@dataclass
class TestWindow:
    series_index: int
    window: int
    context: np.ndarray
    target: np.ndarray
    start: pd.Timestamp  # timestamp of context[0]


def split(dataset: Dataset, windows: int) -> tuple[Dataset, list[TestWindow]]:
    """Hold out the last ``windows * prediction_length`` points of every series.

    The test view yields, per series and window, the full history before the
    window (``context``) and the ``prediction_length`` true values.
    """
    if windows < 1:
        raise DataError("number of rolling windows must be >= 1")
    h = dataset.prediction_length
    holdout = windows * h
    train, tests = [], []
    for i, s in enumerate(dataset):
        if len(s) <= holdout:
            raise DataError(
                f"series {s.id!r} has {len(s)} points; {windows} windows of {h} need more than {holdout}"
            )
        train.append(s.truncate(len(s) - holdout))
        for w in range(windows):
            end = len(s) - (windows - 1 - w) * h
            tests.append(TestWindow(i, w, s.values[: end - h], s.values[end - h : end], s.start))
    return Dataset(train, h, f"{dataset.name}:train"), tests
