"""Autoregressive GRU forecaster with an implicit-quantile emission head.

Training unrolls the GRU over sampled windows with teacher forcing and draws
a fresh quantile level for every element at every step. Inference conditions
on the context and then samples whole trajectories ancestrally: one uniform
level per step, the emitted value fed back as the next lag input.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import DataError, Dataset, TimeSeries
from .iqn import IqnHead, quantile_loss_tensor
from .neural import Adam, GruStack, Module, init_parameters, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "ForecastSampleSet",
    "IqnRnn",
    "TrainResult",
    "train",
    "sample_forecast",
    "sample_forecasts",
    "empirical_quantiles",
    "window_scale",
    "time_features",
    "gradient_check",
    "save_model",
    "load_model",
    "write_forecasts",
]

NUM_TIME_FEATURES = 3  # two calendar fractions + log-age


@dataclass
class ModelConfig:
    prediction_length: int
    context_length: int | None = None
    hidden_size: int = 64
    num_layers: int = 3
    dropout: float = 0.2
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 256
    batches_per_epoch: int = 120
    num_parallel_samples: int = 100
    n_cos: int = 64
    domain: str = "real"
    freq: str = "hourly"
    scaling: str = "auto"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.context_length is None:
            self.context_length = 2 * self.prediction_length
        for name in ("prediction_length", "context_length", "hidden_size", "num_layers",
                     "batch_size", "num_parallel_samples", "n_cos"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.batches_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and batches_per_epoch >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.scaling not in ("auto", "mean_plus_one", "mean", "none"):
            raise ValueError(f"unknown scaling {self.scaling!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def window_length(self) -> int:
        return self.context_length + self.prediction_length

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def scaling_mode(self) -> str:
        if self.scaling != "auto":
            return self.scaling
        return "mean_plus_one" if self.domain in ("positive", "count") else "none"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ForecastSampleSet:
    samples: np.ndarray  # [num_samples x horizon]
    start: pd.Timestamp  # timestamp of the first forecast step
    freq: str
    series_id: str

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def horizon(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def quantile(self, tau) -> np.ndarray:
        return empirical_quantiles(self, [tau])[0]

    def timestamps(self) -> list[pd.Timestamp]:
        return [_offset(self.start, self.freq, k) for k in range(self.horizon)]


# -- features -----------------------------------------------------------------

def _start_units(start: pd.Timestamp, freq: str) -> int:
    """Integer hours (hourly) or days (daily) since the Unix epoch."""
    unit = "h" if freq == "hourly" else "D"
    return int(np.datetime64(pd.Timestamp(start).to_datetime64(), unit).astype(np.int64))


def time_features(start_units: np.ndarray, t: np.ndarray, freq: str, age_scale: float) -> np.ndarray:
    """Calendar fractions plus ``log(1+t)/log(1+age_scale)``; shape ``t.shape + (3,)``.

    hourly: (hour_of_day/23, day_of_week/6); daily: (day_of_week/6, (day_of_month-1)/30).
    """
    u = np.asarray(start_units)[..., None] + t if np.ndim(start_units) else start_units + t
    u = np.asarray(u, dtype=np.int64)
    if freq == "hourly":
        f0 = (u % 24) / 23.0
        f1 = ((u // 24 + 3) % 7) / 6.0  # 1970-01-01 was a Thursday; Monday = 0
    else:
        f0 = ((u + 3) % 7) / 6.0
        days = u.astype("datetime64[D]")
        dom = (days - days.astype("datetime64[M]").astype("datetime64[D]")).astype(np.int64)
        f1 = dom / 30.0
    age = np.log1p(np.broadcast_to(t, u.shape)) / np.log1p(age_scale)
    return np.stack([f0, f1, age], axis=-1)


def window_scale(context: np.ndarray, mode: str) -> np.ndarray:
    """Per-row scale of a ``[batch x context]`` block."""
    context = np.atleast_2d(context)
    if mode == "none":
        return np.ones(context.shape[0])
    m = np.abs(context).mean(axis=1)
    if mode == "mean_plus_one":
        return 1.0 + m
    if mode == "mean":
        return np.maximum(m, 1e-10)
    raise ValueError(f"unknown scaling mode {mode!r}")


# -- model -----------------------------------------------------------------------

class IqnRnn(Module):
    def __init__(self, config: ModelConfig, age_scale: float = 1000.0):
        dtype = config.np_dtype
        self.config = config
        self.age_scale = float(age_scale)
        self.gru = GruStack(NUM_TIME_FEATURES + 1, config.hidden_size, config.num_layers, config.dropout, dtype)
        self.head = IqnHead(config.hidden_size, config.n_cos, config.domain, dtype)
        init_parameters(self, config.seed)

    @property
    def dtype(self):
        return self.config.np_dtype

    def meta(self) -> dict:
        return {"config": self.config.to_dict(), "age_scale": self.age_scale}

    def _inputs(self, feats: np.ndarray, lag: np.ndarray) -> Tensor:
        """Time-major ``[steps*batch x features+1]`` from ``[batch x steps x F]`` and ``[batch x steps]``."""
        x = np.concatenate([feats, lag[..., None]], axis=-1)
        return Tensor(np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(-1, x.shape[-1]).astype(self.dtype))

    def window_loss(
        self,
        values: np.ndarray,
        lag: np.ndarray,
        feats: np.ndarray,
        scale: np.ndarray,
        rng: np.random.Generator,
    ) -> Tensor:
        """Mean quantile loss over every step of a teacher-forced batch of windows.

        ``values``/``lag``: ``[batch x steps]`` raw; ``feats``: ``[batch x steps x F]``.
        """
        batch, steps = values.shape
        inputs = self._inputs(feats, lag / scale[:, None])
        psi, _ = self.gru.unroll(inputs, steps, rng=rng)
        tau = rng.random(steps * batch)
        pred = self.head(psi, tau)
        target = (values / scale[:, None]).T.reshape(-1, 1).astype(self.dtype)
        return ad.mean(quantile_loss_tensor(tau[:, None], target, pred))

    def sample_paths(
        self,
        context: np.ndarray,
        prev: np.ndarray,
        ctx_feats: np.ndarray,
        fut_feats: np.ndarray,
        num_samples: int,
        rng: np.random.Generator,
    ) -> np.ndarray:
        """Ancestral trajectories for a batch of series.

        ``context``: ``[batch x C]`` last observations; ``prev``: the value before
        ``context[:, 0]`` per row (0 when absent); ``ctx_feats``/``fut_feats``:
        covariates for the context and horizon steps. Returns ``[batch x S x h]``.
        """
        batch, C = context.shape
        horizon = fut_feats.shape[1]
        scale = window_scale(context, self.config.scaling_mode)
        lag = np.concatenate([prev[:, None], context[:, :-1]], axis=1) / scale[:, None]
        with ad.no_grad():
            self.eval()
            _, state = self.gru.unroll(self._inputs(ctx_feats, lag), C)
            state = [Tensor(np.repeat(h.data, num_samples, axis=0)) for h in state]
            rep_scale = np.repeat(scale, num_samples)
            last = np.repeat(context[:, -1] / scale, num_samples)
            fut = np.repeat(fut_feats, num_samples, axis=0)
            out = np.empty((batch * num_samples, horizon))
            for k in range(horizon):
                x = np.concatenate([fut[:, k, :], last[:, None]], axis=1).astype(self.dtype)
                psi, state = self.gru.step(Tensor(x), state)
                tau = rng.random(batch * num_samples)
                y = self.head(psi, tau).data[:, 0].astype(np.float64)
                out[:, k] = y * rep_scale
                last = y
        if self.config.domain == "count":
            out = np.floor(out + 0.5)
        return out.reshape(batch, num_samples, horizon)


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: IqnRnn
    loss_trace: list[float]
    seconds: float = 0.0
    skipped: list[str] = field(default_factory=list)


class _WindowSampler:
    """Flat store of all training series; draws random windows with features."""

    def __init__(self, dataset: Dataset, config: ModelConfig, age_scale: float):
        W = config.window_length
        kept = [s for s in dataset if len(s) >= W]
        self.skipped = [s.id for s in dataset if len(s) < W]
        for sid in self.skipped:
            log.warning("series %s shorter than one window (%d); skipped", sid, W)
        if not kept:
            raise DataError("no series is long enough for one training window (empty dataset)")
        self.config = config
        self.W = W
        self.age_scale = age_scale
        lengths = np.array([len(s) for s in kept])
        self.offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.n_starts = lengths - W + 1
        self.prob = lengths / lengths.sum()
        self.values = np.concatenate([s.values for s in kept])
        self.start_units = np.array([_start_units(s.start, s.freq) for s in kept], dtype=np.int64)

    def draw(self, batch: int, rng: np.random.Generator):
        idx = rng.choice(len(self.offsets), size=batch, p=self.prob)
        starts = (rng.random(batch) * self.n_starts[idx]).astype(np.int64)
        t = starts[:, None] + np.arange(self.W)
        flat = self.offsets[idx][:, None] + t
        values = self.values[flat]
        lag = np.where(t > 0, self.values[np.maximum(flat - 1, 0)], 0.0)
        feats = time_features(self.start_units[idx], t, self.config.freq, self.age_scale)
        scale = window_scale(values[:, : self.config.context_length], self.config.scaling_mode)
        return values, lag, feats, scale


def train(
    config: ModelConfig,
    dataset: Dataset,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fit a fresh model; returns it with the per-epoch mean loss."""
    if dataset.freq != config.freq or dataset.domain != config.domain:
        raise ValueError(
            f"config (freq={config.freq}, domain={config.domain}) does not match dataset "
            f"(freq={dataset.freq}, domain={dataset.domain})"
        )
    age_scale = float(max(len(s) for s in dataset)) + config.prediction_length
    sampler = _WindowSampler(dataset, config, age_scale)
    model = IqnRnn(config, age_scale)
    model.train()
    # parameters are seeded by config.seed; batches draw from an independent stream
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.parameters(), lr=config.learning_rate)
    trace = []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(config.batches_per_epoch):
            batch = sampler.draw(config.batch_size, rng)
            opt.zero_grad()
            loss = model.window_loss(*batch, rng)
            loss.backward()
            opt.step()
            total += float(loss.data)
        epoch_loss = total / config.batches_per_epoch
        if not np.isfinite(epoch_loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}: loss {epoch_loss}")
        trace.append(epoch_loss)
        log.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, epoch_loss)
        if callback is not None:
            callback(epoch, epoch_loss)
    model.eval()
    return TrainResult(model, trace, time.perf_counter() - t0, sampler.skipped)


# -- inference ---------------------------------------------------------------------

def _offset(start: pd.Timestamp, freq: str, steps: int) -> pd.Timestamp:
    return pd.Timestamp(start) + pd.Timedelta(steps, unit="h" if freq == "hourly" else "D")


def sample_forecasts(
    model: IqnRnn,
    histories: Sequence[np.ndarray],
    starts: Sequence[pd.Timestamp],
    ids: Sequence[str] | None = None,
    num_samples: int | None = None,
    rng: np.random.Generator | int | None = None,
    chunk_rows: int = 20_000,
) -> list[ForecastSampleSet]:
    """Forecast the ``prediction_length`` steps following each history.

    Series are processed in chunks so that ``series x samples`` rows stay
    below ``chunk_rows``.
    """
    cfg = model.config
    C, h = cfg.context_length, cfg.prediction_length
    S = num_samples or cfg.num_parallel_samples
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng([cfg.seed, 2] if rng is None else rng)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(histories))]
    for sid, hist in zip(ids, histories):
        if len(hist) < C:
            raise ContractError(f"series {sid}: history of {len(hist)} < context_length {C}")
    out: list[ForecastSampleSet] = []
    per_chunk = max(1, chunk_rows // S)
    for lo in range(0, len(histories), per_chunk):
        hs = histories[lo : lo + per_chunk]
        sts = starts[lo : lo + per_chunk]
        lengths = np.array([len(x) for x in hs])
        context = np.stack([np.asarray(x[-C:], dtype=np.float64) for x in hs])
        prev = np.array([x[-C - 1] if len(x) > C else 0.0 for x in hs], dtype=np.float64)
        units = np.array([_start_units(s, cfg.freq) for s in sts], dtype=np.int64)
        t_ctx = (lengths - C)[:, None] + np.arange(C)
        t_fut = lengths[:, None] + np.arange(h)
        ctx_feats = time_features(units, t_ctx, cfg.freq, model.age_scale)
        fut_feats = time_features(units, t_fut, cfg.freq, model.age_scale)
        paths = model.sample_paths(context, prev, ctx_feats, fut_feats, S, rng)
        for j in range(len(hs)):
            out.append(
                ForecastSampleSet(paths[j], _offset(sts[j], cfg.freq, int(lengths[j])), cfg.freq, ids[lo + j])
            )
    return out


def sample_forecast(
    model: IqnRnn,
    series: TimeSeries,
    num_samples: int | None = None,
    rng: np.random.Generator | int | None = None,
) -> ForecastSampleSet:
    """Sample trajectories continuing ``series`` past its last observation."""
    return sample_forecasts(model, [series.values], [series.start], [series.id], num_samples, rng)[0]


def empirical_quantiles(
    fs: ForecastSampleSet | np.ndarray, taus: Sequence[float], method: str = "linear"
) -> np.ndarray:
    """``[len(taus) x horizon]`` quantiles of the sample paths.

    ``linear`` interpolates between order statistics. ``inverse_cdf`` is the
    generalized inverse of the empirical CDF (a step function), the quantile
    function of the distribution that sample-based CRPS scores.
    """
    taus = np.asarray(taus, dtype=np.float64)
    if taus.size == 0:
        raise ValueError("taus must be non-empty")
    if np.any(taus < 0) or np.any(taus > 1):
        raise ValueError("taus must lie in [0, 1]")
    if np.any(np.diff(taus) < 0):
        raise ValueError("taus must be sorted")
    methods = {"linear": "linear", "inverse_cdf": "inverted_cdf"}
    if method not in methods:
        raise ValueError(f"unknown quantile method {method!r}; expected one of {sorted(methods)}")
    samples = fs.samples if isinstance(fs, ForecastSampleSet) else np.asarray(fs)
    return np.quantile(samples, taus, axis=0, method=methods[method])


# -- persistence --------------------------------------------------------------------

def save_model(model: IqnRnn, path) -> None:
    save_checkpoint(path, model, model.meta())


def load_model(path, expect: ModelConfig | None = None) -> IqnRnn:
    """Load a checkpoint; ``expect`` guards against architecture/domain mismatch."""
    state, meta = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["config"])
    if expect is not None:
        for key in ("hidden_size", "num_layers", "n_cos", "domain"):
            if getattr(expect, key) != getattr(config, key):
                raise ValueError(
                    f"checkpoint {key}={getattr(config, key)!r} does not match requested {getattr(expect, key)!r}"
                )
    model = IqnRnn(config, meta["age_scale"])
    model.load_state_dict(state)
    model.eval()
    return model


def write_forecasts(forecasts: Sequence[ForecastSampleSet], path) -> None:
    """Columnar text: ``series_id,sample,step,value`` (step 0 is the first forecast)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("series_id,sample,step,value\n")
        for fs in forecasts:
            for i, row in enumerate(fs.samples):
                for k, v in enumerate(row):
                    fh.write(f"{fs.series_id},{i},{k},{float(v)!r}\n")


# -- gradient check ----------------------------------------------------------------

def gradient_check(seed: int = 0, batch: int = 3) -> float:
    """Finite-difference check of the whole training loss on a miniature model.

    hidden 8, one layer, window 6 (context 4 + horizon 2), float64. Returns
    the max relative error over all parameters.
    """
    cfg = ModelConfig(
        prediction_length=2, context_length=4, hidden_size=8, num_layers=1, dropout=0.0,
        n_cos=64, dtype="float64", seed=seed, domain="positive",
    )
    model = IqnRnn(cfg, age_scale=10.0)
    model.train()
    data_rng = np.random.default_rng([seed, 3])
    # larger-than-init weights so every gate sees non-trivial curvature
    for p in model.parameters():
        p.data = data_rng.normal(0.0, 0.5, size=p.shape)
    values = data_rng.gamma(2.0, 1.5, size=(batch, cfg.window_length))
    lag = np.concatenate([data_rng.gamma(2.0, 1.5, size=(batch, 1)), values[:, :-1]], axis=1)
    t = np.arange(cfg.window_length)[None, :] + data_rng.integers(0, 5, size=(batch, 1))
    feats = time_features(np.zeros(batch, dtype=np.int64), t, "hourly", model.age_scale)
    scale = window_scale(values[:, : cfg.context_length], cfg.scaling_mode)

    def loss():
        return model.window_loss(values, lag, feats, scale, np.random.default_rng([seed, 4]))

    return ad.gradcheck(loss, model.parameters())
