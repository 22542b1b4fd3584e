"""Probabilistic and point metrics over sampled forecasts, and the rolling backtest.

Every backtest window is reduced to additive per-window statistics first
(:class:`WindowScore`); a :class:`MetricsReport` is then a pure function of a
list of those. Weighted metrics (quantile losses, CRPS, NRMSE) divide sums
over the whole list, so scoring two disjoint sub-datasets and concatenating
their windows gives the same report as scoring their union. MSIS, sMAPE and
MASE average per-window values with equal weight.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, split
from .forecaster import ForecastSampleSet, sample_forecasts

log = logging.getLogger(__name__)

__all__ = [
    "SEASONALITY",
    "CRPS_GRID",
    "MetricsError",
    "MetricsReport",
    "WindowScore",
    "weighted_quantile_loss",
    "crps",
    "crps_sample_energy_pointwise",
    "msis",
    "point_metrics",
    "seasonal_naive_mae",
    "score_window",
    "aggregate",
    "backtest",
    "seasonal_naive_forecasts",
]

SEASONALITY = {"hourly": 24, "daily": 1}
CRPS_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


class MetricsError(ValueError):
    """Metric undefined for the given inputs."""


def _as_arrays(forecasts, actuals) -> tuple[np.ndarray, np.ndarray]:
    """Normalize to samples ``[N x S x h]`` and actuals ``[N x h]``."""
    if isinstance(forecasts, ForecastSampleSet):
        forecasts = [forecasts]
    if isinstance(forecasts, (list, tuple)):
        forecasts = np.stack([f.samples if isinstance(f, ForecastSampleSet) else np.asarray(f) for f in forecasts])
    samples = np.asarray(forecasts, dtype=np.float64)
    y = np.asarray(actuals, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    if y.ndim == 1:
        y = y[None]
    if samples.shape[0] != y.shape[0] or samples.shape[2] != y.shape[1]:
        raise MetricsError(f"forecast samples {samples.shape} do not align with actuals {y.shape}")
    return samples, y


def _pinball(tau: float, y: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = y - q
    return np.maximum(tau * d, (tau - 1.0) * d)


def _abs_total(y: np.ndarray) -> float:
    total = float(np.abs(y).sum())
    if total <= 0:
        raise MetricsError("sum of |actuals| is zero; normalized losses are undefined")
    return total


def weighted_quantile_loss(forecasts, actuals, tau: float) -> float:
    """``2 * sum L_tau(y, Q(tau)) / sum |y|`` with Q the empirical sample quantile."""
    samples, y = _as_arrays(forecasts, actuals)
    q = np.quantile(samples, tau, axis=1, method="linear")
    return 2.0 * float(_pinball(tau, y, q).sum()) / _abs_total(y)


def crps_sample_energy_pointwise(samples: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unnormalized ``E|X-y| - E|X-X'|/2`` per point, pairs taken with replacement.

    ``samples`` is ``[N x S x h]``; returns ``[N x h]``.
    """
    S = samples.shape[1]
    term1 = np.abs(samples - y[:, None, :]).mean(axis=1)
    srt = np.sort(samples, axis=1)
    # sum_{i,j} |x_i - x_j| = 2 * sum_i (2i - S + 1) x_(i)
    w = (2.0 * np.arange(S) - S + 1.0)[None, :, None]
    pair = 2.0 * (w * srt).sum(axis=1) / (S * S)
    return term1 - 0.5 * pair


def crps(forecasts, actuals, method: str = "quantile_grid", taus: Sequence[float] = CRPS_GRID) -> float:
    """Normalized CRPS.

    ``quantile_grid``: mean weighted quantile loss over ``taus``.
    ``sample_energy``: sum of per-point sample CRPS over sum |y|.
    """
    samples, y = _as_arrays(forecasts, actuals)
    if method == "quantile_grid":
        return float(np.mean([weighted_quantile_loss(samples, y, t) for t in taus]))
    if method == "sample_energy":
        if samples.shape[1] < 2:
            raise MetricsError("sample_energy CRPS needs at least 2 samples")
        return float(crps_sample_energy_pointwise(samples, y).sum()) / _abs_total(y)
    raise ValueError(f"unknown CRPS method {method!r}")


def seasonal_naive_mae(in_sample: np.ndarray, m: int) -> float:
    in_sample = np.asarray(in_sample, dtype=np.float64)
    if in_sample.size <= m:
        raise MetricsError(f"in-sample length {in_sample.size} must exceed seasonality {m}")
    return float(np.abs(in_sample[m:] - in_sample[:-m]).mean())


def _interval_score(y, lower, upper, alpha):
    return (
        (upper - lower)
        + (2.0 / alpha) * (lower - y) * (y < lower)
        + (2.0 / alpha) * (y - upper) * (y > upper)
    )


def msis(forecasts, actuals, in_sample: Sequence[np.ndarray], m: int, alpha: float = 0.05) -> float:
    """Mean scaled interval score of the central ``1 - alpha`` empirical interval.

    Series whose seasonal-naive denominator is zero are skipped with a warning.
    """
    samples, y = _as_arrays(forecasts, actuals)
    lower = np.quantile(samples, alpha / 2, axis=1, method="linear")
    upper = np.quantile(samples, 1 - alpha / 2, axis=1, method="linear")
    scores = []
    for i in range(y.shape[0]):
        denom = seasonal_naive_mae(in_sample[i], m)
        if denom == 0:
            log.warning("series %d: zero seasonal-naive error; skipped in MSIS", i)
            continue
        scores.append(_interval_score(y[i], lower[i], upper[i], alpha).mean() / denom)
    if not scores:
        raise MetricsError("MSIS undefined: every series has a zero seasonal-naive error")
    return float(np.mean(scores))


def point_metrics(forecasts, actuals, in_sample: Sequence[np.ndarray], m: int) -> tuple[float, float, float]:
    """(NRMSE of the sample mean, sMAPE and MASE of the sample median)."""
    samples, y = _as_arrays(forecasts, actuals)
    mean = samples.mean(axis=1)
    med = np.median(samples, axis=1)
    nrmse = math.sqrt(float(((mean - y) ** 2).mean())) / (_abs_total(y) / y.size)
    smape = float(_smape_terms(y, med).mean())
    ratios = []
    for i in range(y.shape[0]):
        denom = seasonal_naive_mae(in_sample[i], m)
        if denom == 0:
            log.warning("series %d: zero seasonal-naive error; skipped in MASE", i)
            continue
        ratios.append(np.abs(y[i] - med[i]).mean() / denom)
    if not ratios:
        raise MetricsError("MASE undefined: every series has a zero seasonal-naive error")
    return nrmse, smape, float(np.mean(ratios))


def _smape_terms(y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    denom = np.abs(y) + np.abs(yhat)
    num = 2.0 * np.abs(y - yhat)
    return np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)


# -- backtest aggregation ------------------------------------------------------------

@dataclass
class WindowScore:
    """Additive statistics of one (series, window) forecast."""

    series_id: str
    window: int
    n: int
    abs_y: float
    sq_err: float
    ql: dict[float, float]  # tau -> sum of pinball losses
    smape: float  # mean over horizon
    mase: float | None  # None when the naive denominator is zero
    msis: float | None
    crps_energy: float  # sum of unnormalized sample CRPS


def score_window(
    fs: ForecastSampleSet | np.ndarray,
    actual: np.ndarray,
    in_sample: np.ndarray,
    m: int,
    taus: Sequence[float] = CRPS_GRID,
    alpha: float = 0.05,
    series_id: str = "",
    window: int = 0,
) -> WindowScore:
    samples = fs.samples if isinstance(fs, ForecastSampleSet) else np.asarray(fs, dtype=np.float64)
    y = np.asarray(actual, dtype=np.float64)
    grid = sorted(set(taus) | {0.5, 0.9})
    q = np.quantile(samples, grid, axis=0, method="linear")
    ql = {t: float(_pinball(t, y, q[i]).sum()) for i, t in enumerate(grid)}
    med = np.median(samples, axis=0)
    denom = seasonal_naive_mae(in_sample, m)
    lo, hi = np.quantile(samples, [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    if denom == 0:
        log.warning("series %s window %d: zero seasonal-naive error; skipped in MSIS/MASE", series_id, window)
        mase_v = msis_v = None
    else:
        mase_v = float(np.abs(y - med).mean() / denom)
        msis_v = float(_interval_score(y, lo, hi, alpha).mean() / denom)
    energy = crps_sample_energy_pointwise(samples[None], y[None]).sum() if samples.shape[0] > 1 else float("nan")
    return WindowScore(
        series_id=series_id,
        window=window,
        n=y.size,
        abs_y=float(np.abs(y).sum()),
        sq_err=float(((samples.mean(axis=0) - y) ** 2).sum()),
        ql=ql,
        smape=float(_smape_terms(y, med).mean()),
        mase=mase_v,
        msis=msis_v,
        crps_energy=float(energy),
    )


@dataclass
class MetricsReport:
    crps: float
    ql50: float
    ql90: float
    msis: float
    nrmse: float
    smape: float
    mase: float
    crps_energy: float
    num_series: int
    num_windows: int
    num_points: int
    seasonality: int
    skipped_scaled: int = 0
    per_window: list[WindowScore] = field(default_factory=list, repr=False)

    METRICS = ("crps", "ql50", "ql90", "msis", "nrmse", "smape", "mase")

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "per_window"}
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")

    def write_text(self, path) -> None:
        lines = [f"{k}={v!r}" for k, v in self.as_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n")

    def write_per_series_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["series_id", "window", "n", "abs_y", "ql50", "ql90", "smape", "mase", "msis", "crps_energy"])
            for s in self.per_window:
                w.writerow([s.series_id, s.window, s.n, repr(s.abs_y), repr(s.ql[0.5]), repr(s.ql[0.9]),
                            repr(s.smape), "" if s.mase is None else repr(s.mase),
                            "" if s.msis is None else repr(s.msis), repr(s.crps_energy)])


def aggregate(scores: Sequence[WindowScore], seasonality: int, taus: Sequence[float] = CRPS_GRID) -> MetricsReport:
    if not scores:
        raise MetricsError("no windows to aggregate")
    abs_y = sum(s.abs_y for s in scores)
    if abs_y <= 0:
        raise MetricsError("sum of |actuals| is zero; normalized losses are undefined")
    n = sum(s.n for s in scores)

    def wql(t):
        return 2.0 * sum(s.ql[t] for s in scores) / abs_y

    scaled = [s for s in scores if s.mase is not None]
    if not scaled:
        raise MetricsError("MSIS/MASE undefined: every window has a zero seasonal-naive error")
    return MetricsReport(
        crps=float(np.mean([wql(t) for t in taus])),
        ql50=wql(0.5),
        ql90=wql(0.9),
        msis=float(np.mean([s.msis for s in scaled])),
        nrmse=math.sqrt(sum(s.sq_err for s in scores) / n) / (abs_y / n),
        smape=float(np.mean([s.smape for s in scores])),
        mase=float(np.mean([s.mase for s in scaled])),
        crps_energy=sum(s.crps_energy for s in scores) / abs_y,
        num_series=len({s.series_id for s in scores}),
        num_windows=len(scores),
        num_points=n,
        seasonality=seasonality,
        skipped_scaled=len(scores) - len(scaled),
        per_window=list(scores),
    )


ForecastFn = Callable[[Sequence[np.ndarray], Sequence, Sequence[str]], list]


def backtest(
    model,
    dataset: Dataset,
    windows: int,
    num_samples: int = 100,
    seasonality: int | None = None,
    rng: np.random.Generator | int | None = None,
    forecast_fn: ForecastFn | None = None,
) -> MetricsReport:
    """Rolling-window evaluation over the last ``windows`` horizons of every series.

    ``forecast_fn(histories, starts, ids)`` overrides the model (baselines,
    oracles); it must return one ``[S x h]`` array or sample set per history.
    """
    m = seasonality if seasonality is not None else SEASONALITY[dataset.freq]
    _, tests = split(dataset, windows)
    histories = [t.context for t in tests]
    starts = [t.start for t in tests]
    ids = [dataset.series[t.series_index].id for t in tests]
    if forecast_fn is None:
        forecasts = sample_forecasts(model, histories, starts, ids, num_samples, rng)
    else:
        forecasts = forecast_fn(histories, starts, ids)
    scores = [
        score_window(fs, t.target, t.context, m, series_id=sid, window=t.window)
        for fs, t, sid in zip(forecasts, tests, ids)
    ]
    return aggregate(scores, m)


def seasonal_naive_forecasts(
    histories: Sequence[np.ndarray],
    horizon: int,
    m: int,
    num_samples: int = 100,
    seasons: int = 7,
    rng: np.random.Generator | int | None = 0,
) -> list[np.ndarray]:
    """Baseline sampler: each step resamples the same-phase values of the last ``seasons`` cycles."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = []
    for hist in histories:
        hist = np.asarray(hist, dtype=np.float64)
        T = hist.size
        samples = np.empty((num_samples, horizon))
        for k in range(horizon):
            idx = T + k - m * np.arange(1, seasons + 1)
            idx = idx[(idx >= 0) & (idx < T)]
            pool = hist[idx] if idx.size else hist[-1:]
            samples[:, k] = rng.choice(pool, size=num_samples)
        out.append(samples)
    return out
