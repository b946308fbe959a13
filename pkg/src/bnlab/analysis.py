"""Statistics of learned batchnorm parameters and of ReLU activity."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .reports import Report
from .training import evaluate

DEFAULT_THRESHOLDS = (0.01, 0.05, 0.1, 0.2)
HIST_BINS = 64


class FitError(ValueError):
    pass


def _concat(arrays: dict[str, np.ndarray]) -> np.ndarray:
    if not arrays:
        raise ValueError("checkpoint has no batchnorm parameters")
    return np.concatenate([a.astype(np.float64).ravel() for _, a in sorted(arrays.items())])


def histogram(values: np.ndarray, bins: int = HIST_BINS, value_range: tuple[float, float] | None = None):
    lo, hi = value_range if value_range is not None else (float(values.min()), float(values.max()))
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return counts, edges


@dataclass
class GammaStats:
    gamma: np.ndarray
    beta: np.ndarray
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    @staticmethod
    def _moments(v: np.ndarray) -> dict:
        return {"mean": float(v.mean()), "std": float(v.std()), "fraction_negative": float((v < 0).mean()),
                "count": int(v.size)}

    @property
    def mean(self) -> float:
        return float(self.gamma.mean())

    @property
    def std(self) -> float:
        return float(self.gamma.std())

    @property
    def fraction_negative(self) -> float:
        return float((self.gamma < 0).mean())

    def fraction_below(self, theta: float) -> float:
        """Fraction of gamma with |gamma| < theta."""
        return float(np.count_nonzero(np.abs(self.gamma) < theta)) / self.gamma.size

    def histogram(self, which: str = "gamma", bins: int = HIST_BINS):
        return histogram(self.gamma if which == "gamma" else self.beta, bins)

    def report(self) -> Report:
        cols = ["parameter", "count", "mean", "std", "fraction_negative"] + [f"frac_abs_below_{t:g}" for t in
                                                                            self.thresholds]
        rows = []
        for name, v in (("gamma", self.gamma), ("beta", self.beta)):
            row = {"parameter": name, **self._moments(v)}
            for t in self.thresholds:
                row[f"frac_abs_below_{t:g}"] = float(np.count_nonzero(np.abs(v) < t)) / v.size
            rows.append(row)
        return Report(cols, rows)

    def histogram_report(self, which: str = "gamma", bins: int = HIST_BINS) -> Report:
        counts, edges = self.histogram(which, bins)
        return Report(["bin_left", "count"],
                      [{"bin_left": float(e), "count": int(c)} for e, c in zip(edges[:-1], counts)],
                      {"parameter": which, "bins": bins, "range_low": float(edges[0]), "range_high": float(edges[-1])})


def gamma_distribution(ckpt: Checkpoint, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> GammaStats:
    """Pool gamma and beta over every batchnorm layer, shortcut ones included."""
    return GammaStats(_concat(ckpt.gammas()), _concat(ckpt.betas()), tuple(thresholds))


def clamp_gamma(ckpt: Checkpoint, theta: float) -> tuple[Checkpoint, int, float]:
    """Copy of ``ckpt`` with every |gamma| < theta set to exactly 0."""
    if theta < 0 or math.isnan(theta):
        raise ValueError("clamp threshold must be >= 0")
    out = ckpt.copy()
    count = total = 0
    for name, g in out.gammas().items():
        hit = np.abs(g) < theta
        count += int(hit.sum())
        total += g.size
        if hit.any():
            g = g.copy()
            g[hit] = 0
            out.params[name] = g
    out.meta = {**out.meta, "clamp_theta": theta}
    return out, count, count / total if total else 0.0


def clamp_sweep(ckpt: Checkpoint, thresholds: Iterable[float], dataset) -> Report:
    """Accuracy after clamping at each threshold, relative to the unclamped model."""
    base = evaluate(ckpt, dataset, (1,)).top1
    rows = []
    for theta in thresholds:
        clamped, count, frac = clamp_gamma(ckpt, float(theta))
        acc = evaluate(clamped, dataset, (1,)).top1 if count else base
        rows.append({"threshold": float(theta), "clamped": count, "fraction_clamped": frac, "accuracy": acc,
                     "accuracy_delta": acc - base})
    return Report(["threshold", "clamped", "fraction_clamped", "accuracy", "accuracy_delta"], rows,
                  {"baseline_accuracy": base})


@dataclass
class ActivationStats:
    zero_probability: dict[str, np.ndarray]  # ReLU layer -> per-channel Pr[output == 0]
    threshold: float = 0.99
    bins: int = HIST_BINS

    def all_probabilities(self) -> np.ndarray:
        return np.concatenate([v for v in self.zero_probability.values()]) if self.zero_probability else np.zeros(0)

    @property
    def fraction_disabled(self) -> float:
        p = self.all_probabilities()
        return float((p > self.threshold).mean()) if p.size else 0.0

    def histogram(self):
        return histogram(self.all_probabilities(), self.bins, (0.0, 1.0))

    def report(self) -> Report:
        rows = []
        for name, p in self.zero_probability.items():
            rows.append({"relu": name, "units": int(p.size), "mean_zero_probability": float(p.mean()),
                         "fraction_disabled": float((p > self.threshold).mean())})
        rows.append({"relu": "ALL", "units": int(self.all_probabilities().size),
                     "mean_zero_probability": float(self.all_probabilities().mean()),
                     "fraction_disabled": self.fraction_disabled})
        return Report(["relu", "units", "mean_zero_probability", "fraction_disabled"], rows,
                      {"disabled_if_zero_probability_above": self.threshold})

    def histogram_report(self) -> Report:
        counts, edges = self.histogram()
        return Report(["bin_left", "count"],
                      [{"bin_left": float(e), "count": int(c)} for e, c in zip(edges[:-1], counts)],
                      {"bins": self.bins, "range_low": 0.0, "range_high": 1.0})


def activation_zero_frequency(model, dataset, batch_size: int = 500, threshold: float = 0.99) -> ActivationStats:
    """Per (ReLU layer, channel) probability of an exact-zero output over examples x positions."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    net = model.to_network() if isinstance(model, Checkpoint) else model
    zeros: dict[str, np.ndarray] = {}
    totals: dict[str, int] = {}

    def observe(name, arr):
        z = (arr == 0).sum(axis=(0, 2, 3)) if arr.ndim == 4 else (arr == 0).sum(axis=0)
        zeros[name] = zeros.get(name, 0) + z
        totals[name] = totals.get(name, 0) + arr.size // arr.shape[1]

    with T.no_grad():
        for i in range(0, len(dataset), batch_size):
            idx = np.arange(i, min(i + batch_size, len(dataset)))
            net.forward(dataset.normalized(idx), train=False, observe=observe)
    probs = {n: zeros[n] / totals[n] for n in zeros}
    return ActivationStats(probs, threshold)


@dataclass
class LineFit:
    slope: float
    intercept: float
    r2: float
    n: int


def fit_log2(points: Sequence[tuple[float, float]]) -> LineFit:
    """Least squares of accuracy on log2(parameter count)."""
    if len(points) < 2:
        raise FitError("need at least two points")
    x = np.log2(np.array([p[0] for p in points], dtype=np.float64))
    y = np.array([p[1] for p in points], dtype=np.float64)
    xc = x - x.mean()
    sxx = float((xc**2).sum())
    if sxx <= 1e-12 * max(1.0, float((x**2).sum())):
        raise FitError("degenerate x range: all parameter counts are equal")
    slope = float((xc * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / sst if sst > 0 else 1.0
    return LineFit(slope, intercept, r2, len(points))


def scaling_regression(groups: dict[str, Sequence[tuple[float, float]]]) -> tuple[dict[str, LineFit], float | None]:
    """Fit each group; also return slope(first) / slope(second) when two groups are given."""
    fits = {g: fit_log2(pts) for g, pts in groups.items()}
    ratio = None
    if len(fits) == 2:
        a, b = list(fits.values())
        ratio = a.slope / b.slope if b.slope != 0 else math.inf
    return fits, ratio


def scaling_report(fits: dict[str, LineFit], ratio: float | None) -> Report:
    rows = [{"group": g, "points": f.n, "slope_per_doubling": f.slope, "intercept": f.intercept, "r2": f.r2}
            for g, f in fits.items()]
    meta = {"slope_ratio": ratio} if ratio is not None else {}
    return Report(["group", "points", "slope_per_doubling", "intercept", "r2"], rows, meta)
