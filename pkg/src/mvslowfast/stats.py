"""Small statistics helpers: log-log slopes, batch means, trend tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    ci: tuple
    r2: float
    stderr: float


def loglog_fit(x, y, level: float = 0.95) -> SlopeFit:
    """Least-squares fit of ``log y = a + s log x`` with a t-based CI for ``s``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need at least two (x, y) pairs of equal length")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive data")
    lx, ly = np.log(x), np.log(y)
    if np.ptp(lx) == 0:
        raise ValueError("slope fit underdetermined: all x equal")
    res = sps.linregress(lx, ly)
    dof = x.size - 2
    if dof > 0:
        half = sps.t.ppf(0.5 + level / 2, dof) * res.stderr
        r2 = res.rvalue**2
    else:
        half, r2 = float("inf"), 1.0
    return SlopeFit(float(res.slope), float(res.intercept),
                    (float(res.slope - half), float(res.slope + half)), float(r2),
                    float(res.stderr))


def batch_means(values, n_batches: int = 10):
    """Mean and batch-means standard error of a correlated 1-D series."""
    values = np.asarray(values, dtype=float).ravel()
    n_batches = min(n_batches, values.size)
    if n_batches < 2:
        raise ValueError("need at least two batches")
    size = values.size // n_batches
    means = values[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(values.mean()), float(means.std(ddof=1) / np.sqrt(n_batches))


def mean_stderr(samples, axis=0):
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[axis]
    se = samples.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(samples.mean(axis=axis))
    return samples.mean(axis=axis), se


def growth_trend(epsilons, statistic, alpha: float = 0.05):
    """One-sided Kendall tau test for growth of ``statistic`` as epsilon shrinks.

    Returns ``(tau, p_value, significant)``.
    """
    inv = 1.0 / np.asarray(epsilons, dtype=float)
    tau, p = sps.kendalltau(inv, np.asarray(statistic, dtype=float), alternative="greater")
    if np.isnan(tau):
        return 0.0, 1.0, False
    return float(tau), float(p), bool(p < alpha)
