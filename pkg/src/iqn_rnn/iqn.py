"""Implicit quantile emission head and the quantile (pinball) loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .neural import Linear, Module

__all__ = [
    "DOMAINS",
    "CosineEmbedding",
    "GeneratorHead",
    "IqnHead",
    "cosine_features",
    "quantile_loss",
    "quantile_loss_tensor",
]

# value domain -> output activation
DOMAINS = {
    "real": None,
    "positive": ad.softplus,
    "count": ad.softplus,
    "unit_interval": ad.sigmoid,
}


def _check_tau(tau: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau)
    if np.any(tau < 0) or np.any(tau > 1) or np.any(np.isnan(tau)):
        raise ValueError("quantile levels must lie in [0, 1]")
    return tau


def cosine_features(tau, n: int, dtype=np.float64) -> np.ndarray:
    """``cos(pi * i * tau)`` for ``i = 0 .. n-1``; shape ``[len(tau) x n]``."""
    tau = _check_tau(np.atleast_1d(tau)).reshape(-1, 1)
    return np.cos(np.pi * np.arange(n) * tau).astype(dtype)


class CosineEmbedding(Module):
    def __init__(self, n: int, hidden_size: int, dtype=np.float64):
        self.n = n
        self.projection = Linear(n, hidden_size, dtype)

    def __call__(self, tau, batch: int | None = None) -> Tensor:
        """Embed quantile levels.

        ``tau`` is either a scalar (broadcast to ``batch`` rows) or one level per row.
        """
        tau = np.asarray(tau, dtype=np.float64)
        if tau.ndim == 0:
            if batch is None:
                batch = 1
            tau = np.full(batch, float(tau))
        feats = cosine_features(tau, self.n, self.projection.weight.dtype)
        return ad.relu(self.projection(Tensor(feats)))


class GeneratorHead(Module):
    def __init__(self, hidden_size: int, domain: str = "real", dtype=np.float64):
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}; expected one of {sorted(DOMAINS)}")
        self.domain = domain
        self.hidden = Linear(hidden_size, hidden_size, dtype)
        self.out = Linear(hidden_size, 1, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.out(ad.relu(self.hidden(x)))
        act = DOMAINS[self.domain]
        return act(y) if act is not None else y


class IqnHead(Module):
    """``q(psi * (1 + phi(tau)))`` with ``phi`` the cosine embedding."""

    def __init__(self, hidden_size: int, n_cos: int = 64, domain: str = "real", dtype=np.float64):
        self.hidden_size = hidden_size
        self.embedding = CosineEmbedding(n_cos, hidden_size, dtype)
        self.generator = GeneratorHead(hidden_size, domain, dtype)

    @property
    def domain(self) -> str:
        return self.generator.domain

    def __call__(self, psi: Tensor, tau) -> Tensor:
        if psi.ndim != 2 or psi.shape[1] != self.hidden_size:
            raise DimensionError(f"head expects [batch x {self.hidden_size}] state, got {psi.shape}")
        phi = self.embedding(tau, batch=psi.shape[0])
        if phi.shape[0] != psi.shape[0]:
            raise DimensionError(f"{phi.shape[0]} quantile levels for {psi.shape[0]} states")
        return self.generator(psi * (phi + 1.0))


def quantile_loss(tau, y, y_hat):
    """Pinball loss ``tau*(y-y_hat)_+ + (1-tau)*(y_hat-y)_+`` on plain numbers/arrays."""
    tau = _check_tau(tau)
    diff = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    out = tau * np.maximum(diff, 0.0) + (1.0 - tau) * np.maximum(-diff, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def quantile_loss_tensor(tau: np.ndarray, y: Tensor | np.ndarray, y_hat: Tensor) -> Tensor:
    """Differentiable elementwise pinball loss.

    Written as ``(y - y_hat) * (tau - 1{y < y_hat})`` which equals the
    two-sided form and needs a single multiply on the tape.
    """
    tau = _check_tau(tau).astype(y_hat.dtype)
    diff = ad.sub(y, y_hat)
    weight = tau - (diff.data < 0).astype(y_hat.dtype)
    return diff * weight
