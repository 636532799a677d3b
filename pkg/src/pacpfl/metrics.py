"""Accuracy and calibration metrics for mixture predictions."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .gp import PredictiveMixture

# Normal quantile for a two-sided 95% interval.
Z95 = 1.959963984540054


@dataclass
class PredictionSet:
    """Mixture predictions at ``n`` test points and the observed targets.

    ``weights`` is ``(k,)`` (shared across points) or ``(n, k)``; ``means``
    and ``variances`` are ``(n, k)``.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 1:
            w = np.broadcast_to(w, self.means.shape)
        self.weights = w
        if self.means.shape != self.variances.shape or self.means.shape != w.shape:
            raise ValueError("weights, means and variances must share shape (n, k)")
        if self.means.shape[0] != self.y.shape[0]:
            raise ValueError("one target per test point required")
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be positive")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("mixture weights must sum to 1")

    @classmethod
    def from_mixture(cls, mixture: PredictiveMixture, y):
        return cls(mixture.weights, mixture.means, mixture.variances, y)

    @classmethod
    def gaussian(cls, mean, variance, y):
        """Single-component predictions."""
        mean = np.asarray(mean, dtype=np.float64).ravel()
        var = np.broadcast_to(np.asarray(variance, dtype=np.float64), mean.shape)
        return cls(np.ones(1), mean[:, None], np.array(var)[:, None], y)

    @property
    def mean(self) -> np.ndarray:
        return np.sum(self.weights * self.means, axis=1)

    def cdf(self, y=None) -> np.ndarray:
        y = self.y if y is None else np.asarray(y, dtype=np.float64)
        z = (y[:, None] - self.means) / np.sqrt(self.variances)
        return np.sum(self.weights * norm.cdf(z), axis=1)


def rsmse(predictions: PredictionSet) -> float:
    """RMSE of the mixture mean divided by the (population) std of the targets."""
    y = predictions.y
    if y.size < 2:
        raise ValueError("rsmse needs at least 2 test points")
    sd = y.std()
    if sd == 0:
        raise ValueError("targets have zero variance")
    rmse = np.sqrt(np.mean((predictions.mean - y) ** 2))
    return float(rmse / sd)


def confidence_levels(H=20) -> np.ndarray:
    """Equally spaced levels ``h/H`` for ``h = 1..H``."""
    return np.arange(1, H + 1) / H


def calibration_error_regression(predictions: PredictionSet, H=20) -> float:
    """Mean absolute gap between nominal levels and empirical CDF coverage."""
    if predictions.y.size < 1:
        raise ValueError("need at least one test point")
    u = predictions.cdf()
    q = confidence_levels(H)
    q_hat = np.mean(u[None, :] <= q[:, None], axis=1)
    return float(np.mean(np.abs(q_hat - q)))


def calibration_error_classification(confidences, correctness, H=20) -> float:
    """Binned expected calibration error over ``H`` equal-width bins of (0, 1]."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correctness, dtype=np.float64).ravel()
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness must have equal length")
    if np.any((conf <= 0) | (conf > 1)):
        raise ValueError("confidences must lie in (0, 1]")
    # Bin h covers ((h-1)/H, h/H].
    bins = np.clip(np.ceil(conf * H).astype(int), 1, H)
    m = conf.size
    total = 0.0
    for h in np.unique(bins):
        sel = bins == h
        total += sel.sum() / m * abs(corr[sel].mean() - conf[sel].mean())
    return float(total)


@dataclass
class Summary:
    group: str
    metric: str
    count: int
    mean: float
    median: float
    q1: float
    q3: float
    half_width: float

    def as_row(self):
        return [self.group, self.metric, self.count, self.mean, self.median,
                self.q1, self.q3, self.half_width]


SUMMARY_HEADER = ["group", "metric", "count", "mean", "median", "q1", "q3", "ci95_half_width"]


def summarize(values, group="existing", metric="rsmse") -> Summary:
    """Mean, median, linear-interpolation quartiles and a normal 95% half-width."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 1:
        raise ValueError("summarize needs at least one value")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    hw = 0.0 if v.size < 2 else Z95 * v.std(ddof=1) / np.sqrt(v.size)
    return Summary(group, metric, int(v.size), float(v.mean()), float(med), float(q1), float(q3), float(hw))


def write_metrics_csv(rows, path):
    """Per-client rows of ``(client_id, group, rsmse, ce)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "group", "rsmse", "ce"])
        for cid, group, r, c in rows:
            w.writerow([cid, group, repr(float(r)), repr(float(c))])


def write_summary_csv(summaries, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            w.writerow(s.as_row())
