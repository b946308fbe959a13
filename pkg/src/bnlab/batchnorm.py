"""Batch normalization with trainable per-feature scale (gamma) and shift (beta)."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .rng import Prng
from .tensor import ShapeError, Tensor, _record, _wants, _check_dtype

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


class DegenerateBatchError(ValueError):
    """A train-mode batch has fewer than two values per feature."""


class UninitializedStatisticsError(RuntimeError):
    """Eval mode was requested before running statistics exist."""


class BnInitScheme(str, enum.Enum):
    UNIFORM01_ZERO = "uniform01_zero"
    ONE_ZERO = "one_zero"
    UNIFORM_SYM_ZERO = "uniform_sym_zero"
    ONE_ONE = "one_one"


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS
    stat_momentum: float = DEFAULT_MOMENTUM
    mode: str = "train"
    stats_ready: bool = field(default=False)

    def __post_init__(self):
        c = self.gamma.shape
        if not (len(c) == 1 and self.beta.shape == c and self.running_mean.shape == c and self.running_var.shape == c):
            raise ShapeError("gamma, beta and running statistics must be vectors of equal length")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.stat_momentum <= 1:
            raise ValueError("stat_momentum must lie in (0, 1]")

    @property
    def features(self) -> int:
        return self.gamma.shape[0]

    def load_statistics(self, mean: np.ndarray, var: np.ndarray) -> None:
        if np.any(var < 0):
            raise ValueError("running variance must be non-negative")
        self.running_mean = np.array(mean, dtype=self.running_mean.dtype)
        self.running_var = np.array(var, dtype=self.running_var.dtype)
        self.stats_ready = True


def bn_init(features: int, scheme: BnInitScheme | str = BnInitScheme.UNIFORM01_ZERO,
            rng: Prng | None = None, dtype=np.float32) -> BatchNormState:
    """Fresh state; gamma is drawn from ``rng`` for the uniform schemes."""
    if features < 1:
        raise ValueError("feature count must be at least 1")
    scheme = BnInitScheme(scheme)
    if scheme in (BnInitScheme.UNIFORM01_ZERO, BnInitScheme.UNIFORM_SYM_ZERO) and rng is None:
        raise ValueError(f"{scheme.value} needs an rng")
    if scheme is BnInitScheme.UNIFORM01_ZERO:
        gamma = rng.uniform(0.0, 1.0, features, dtype=dtype)
    elif scheme is BnInitScheme.UNIFORM_SYM_ZERO:
        gamma = rng.uniform(-1.0, 1.0, features, dtype=dtype)
    else:
        gamma = np.ones(features, dtype=dtype)
    beta = np.ones(features, dtype=dtype) if scheme is BnInitScheme.ONE_ONE else np.zeros(features, dtype=dtype)
    return BatchNormState(
        gamma=Tensor(gamma, requires_grad=True, dtype=dtype),
        beta=Tensor(beta, requires_grad=True, dtype=dtype),
        running_mean=np.zeros(features, dtype=dtype),
        running_var=np.ones(features, dtype=dtype),
    )


def _axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects [B, C] or [B, C, H, W], got shape {x.shape}")
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def bn_forward_train(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalize with batch statistics (biased variance) and update the running EMA."""
    if state.mode != "train":
        raise RuntimeError("bn_forward_train called on a state in eval mode")
    xd = x.data
    axes = _axes(xd)
    if xd.shape[1] != state.features:
        raise ShapeError(f"input has {xd.shape[1]} features, batchnorm has {state.features}")
    _check_dtype(x, state.gamma, state.beta)
    n = xd.size // xd.shape[1]
    if n < 2:
        raise DegenerateBatchError(f"batchnorm needs at least 2 values per feature in train mode, got {n}")
    mu = xd.mean(axis=axes)
    centered = xd - _bcast(mu, xd.ndim)
    var = (centered * centered).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * _bcast(inv_std, xd.ndim)
    gd = state.gamma.data
    out = xhat * _bcast(gd, xd.ndim) + _bcast(state.beta.data, xd.ndim)

    m = state.stat_momentum
    state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
    state.running_var = ((1 - m) * state.running_var + m * var).astype(state.running_var.dtype)
    state.stats_ready = True

    def vjp(g):
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        gx = None
        if _wants(x):
            scale = _bcast(gd * inv_std / n, xd.ndim)
            gx = scale * (n * g - _bcast(gb, xd.ndim) - xhat * _bcast(gg, xd.ndim))
        return gx, (gg if _wants(state.gamma) else None), (gb if _wants(state.beta) else None)

    return _record(out.astype(xd.dtype, copy=False), "batchnorm_train", (x, state.gamma, state.beta), vjp)


def bn_forward_eval(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalize with running statistics; statistics are left untouched."""
    if not state.stats_ready:
        raise UninitializedStatisticsError("running statistics are unset: run a train step or load statistics first")
    xd = x.data
    _axes(xd)
    if xd.shape[1] != state.features:
        raise ShapeError(f"input has {xd.shape[1]} features, batchnorm has {state.features}")
    inv_std = _bcast(1.0 / np.sqrt(state.running_var + state.eps), xd.ndim).astype(xd.dtype)
    xhat = (xd - _bcast(state.running_mean, xd.ndim)) * inv_std
    gd = state.gamma.data
    out = xhat * _bcast(gd, xd.ndim) + _bcast(state.beta.data, xd.ndim)

    def vjp(g):
        axes = _axes(g)
        gx = g * inv_std * _bcast(gd, xd.ndim) if _wants(x) else None
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out.astype(xd.dtype, copy=False), "batchnorm_eval", (x, state.gamma, state.beta), vjp)


def bn_forward(x: Tensor, state: BatchNormState) -> Tensor:
    return bn_forward_train(x, state) if state.mode == "train" else bn_forward_eval(x, state)
