"""Layers, GRU stack, Adam and parameter checkpoints built on :mod:`autodiff`.

GRU variant (gate order reset, update, candidate; fused along columns)::

    r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
    z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
    n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
    h' = (1 - z) * n + z * h

The reset gate multiplies the already-projected recurrent term of the
candidate, which is the cuDNN/PyTorch flavour of the original GRU.

Weights are stored ``[in x out]`` so that a layer is ``x @ W + b``.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

__all__ = [
    "Module",
    "Linear",
    "GruCell",
    "GruStack",
    "Adam",
    "init_parameters",
    "save_checkpoint",
    "load_checkpoint",
]


class Module:
    """Container that discovers trainable tensors by attribute order."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self._modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value._modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item._modules()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _param(shape: Sequence[int], dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, dtype=np.float64):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _param((in_features, out_features), dtype)
        self.bias = _param((out_features,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects {self.in_features} features, got shape {x.shape}")
        return ad.matmul(x, self.weight) + self.bias


class GruCell(Module):
    def __init__(self, input_size: int, hidden_size: int, dtype=np.float64):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight_ih = _param((input_size, 3 * hidden_size), dtype)
        self.weight_hh = _param((hidden_size, 3 * hidden_size), dtype)
        self.bias_ih = _param((3 * hidden_size,), dtype)
        self.bias_hh = _param((3 * hidden_size,), dtype)

    def project_input(self, x: Tensor) -> Tensor:
        """Input half of all three gates; may be computed for many steps at once."""
        if x.shape[-1] != self.input_size:
            raise DimensionError(f"GruCell expects {self.input_size} input features, got shape {x.shape}")
        return ad.matmul(x, self.weight_ih) + self.bias_ih

    def recur(self, xw: Tensor, h: Tensor) -> Tensor:
        """One step given the pre-projected input ``xw`` and previous state ``h``."""
        H = self.hidden_size
        hw = ad.matmul(h, self.weight_hh) + self.bias_hh
        rz = ad.sigmoid(xw[:, : 2 * H] + hw[:, : 2 * H])
        r = rz[:, :H]
        z = rz[:, H:]
        n = ad.tanh(xw[:, 2 * H :] + r * hw[:, 2 * H :])
        return z * (h - n) + n

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return self.recur(self.project_input(x), h)


class GruStack(Module):
    """Stacked GRU with inverted dropout on the activations between layers."""

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        num_layers: int,
        dropout: float = 0.0,
        dtype=np.float64,
    ):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.hidden_size = hidden_size
        self.dropout = dropout
        self.layers = [
            GruCell(input_size if i == 0 else hidden_size, hidden_size, dtype) for i in range(num_layers)
        ]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def initial_state(self, batch: int, dtype=None) -> list[Tensor]:
        dtype = dtype or self.layers[0].weight_hh.dtype
        return [Tensor(np.zeros((batch, self.hidden_size), dtype=dtype)) for _ in self.layers]

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        if not self.training or self.dropout == 0.0:
            return x
        if rng is None:
            raise ContractError("training-mode dropout needs an explicit random generator")
        keep = 1.0 - self.dropout
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * mask

    def step(
        self,
        x: Tensor,
        state: Sequence[Tensor],
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Advance every layer by one time step; returns (top output, new state)."""
        if len(state) != len(self.layers):
            raise ContractError(f"state has {len(state)} entries for {len(self.layers)} layers")
        new_state = []
        inp = x
        for i, (cell, h) in enumerate(zip(self.layers, state)):
            if i > 0:
                inp = self._dropout(inp, rng)
            h = cell(inp, h)
            new_state.append(h)
            inp = h
        return inp, new_state

    def unroll(
        self,
        inputs: Tensor,
        steps: int,
        state: Sequence[Tensor] | None = None,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Run a fully known input sequence through the stack layer by layer.

        ``inputs`` is time-major and flattened, ``[steps * batch x features]``.
        Returns the top-layer outputs in the same layout plus the final state.
        Equivalent to calling :meth:`step` ``steps`` times, but each layer's
        input projection is a single matmul.
        """
        rows = inputs.shape[0]
        if rows % steps:
            raise DimensionError(f"{rows} input rows do not split into {steps} steps")
        batch = rows // steps
        if state is None:
            state = self.initial_state(batch, inputs.dtype)
        if len(state) != len(self.layers):
            raise ContractError(f"state has {len(state)} entries for {len(self.layers)} layers")
        seq = inputs
        final = []
        for i, (cell, h) in enumerate(zip(self.layers, state)):
            if i > 0:
                seq = self._dropout(seq, rng)
            xw = cell.project_input(seq)
            outs = []
            for t in range(steps):
                h = cell.recur(xw[t * batch : (t + 1) * batch], h)
                outs.append(h)
            final.append(h)
            seq = ad.concat(outs, axis=0)
        return seq, final


def init_parameters(module: Module, seed: int | np.random.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    for name, p in module.named_parameters():
        if p.ndim == 1:
            p.data = np.zeros_like(p.data)
        else:
            bound = 1.0 / np.sqrt(p.shape[0])
            p.data = rng.uniform(-bound, bound, size=p.shape).astype(p.dtype)
        p.grad = None


class Adam:
    """Bias-corrected Adam; gradients are read, never cleared."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} (shape {p.shape}) has no gradient")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- checkpoints -------------------------------------------------------------
# A checkpoint is a zip archive (numpy .npz layout): one ``<name>.npy`` array
# per parameter, plus ``__meta__.json`` holding the model config and the
# ordered parameter names with their shapes and dtypes.

_META = "__meta__.json"


def _entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp so identical parameters give byte-identical files
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_checkpoint(path: str | Path, module: Module, meta: dict | None = None) -> None:
    state = module.state_dict()
    manifest = {
        "meta": meta or {},
        "parameters": [
            {"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()
        ],
    }
    with zipfile.ZipFile(path, "w") as zf:
        for name, value in state.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, value, allow_pickle=False)
            zf.writestr(_entry(name + ".npy"), buf.getvalue())
        zf.writestr(_entry(_META), json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(state, meta)`` from a file written by :func:`save_checkpoint`."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read(_META))
    with np.load(path) as npz:
        state = {entry["name"]: npz[entry["name"]] for entry in manifest["parameters"]}
    return state, manifest["meta"]
