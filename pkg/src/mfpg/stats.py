"""Summary statistics for evaluation curves and across-seed comparisons."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    ci_low: float
    ci_high: float
    resamples: int
    level: float = 0.95

    @property
    def excludes_zero(self) -> bool:
        return self.ci_low > 0.0 or self.ci_high < 0.0

    def as_dict(self) -> dict:
        return {"point": self.point, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "resamples": self.resamples, "level": self.level}


def final_return(values, window: int = 20) -> float:
    """Mean of the last ``window`` curve values (all of them if the curve is shorter)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty curve")
    return float(values[-window:].mean())


def auc(steps, values) -> float:
    """Composite trapezoidal area under ``values`` against ``steps``."""
    x = np.asarray(steps, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.size < 2 or x.shape != y.shape:
        raise ValueError("AUC needs at least two aligned points")
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def _resampled_means(x: np.ndarray, resamples: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    return x[idx].mean(axis=1)


def _percentiles(stats: np.ndarray, level: float):
    alpha = 1.0 - level
    lo, hi = np.quantile(stats, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(lo), float(hi)


def bootstrap_mean_ci(samples, resamples: int = 10_000, level: float = 0.95,
                      rng=None) -> BootstrapResult:
    """Percentile bootstrap interval for the mean, resampling with replacement."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValueError("bootstrap needs at least two samples")
    rng = np.random.default_rng(0 if rng is None else rng)
    lo, hi = _percentiles(_resampled_means(x, resamples, rng), level)
    return BootstrapResult(float(x.mean()), lo, hi, resamples, level)


def bootstrap_diff_ci(a, b, resamples: int = 10_000, level: float = 0.95,
                      rng=None) -> BootstrapResult:
    """Interval for ``mean(a) - mean(b)``, resampling each group independently."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("bootstrap needs at least two samples per group")
    rng = np.random.default_rng(0 if rng is None else rng)
    diffs = _resampled_means(a, resamples, rng) - _resampled_means(b, resamples, rng)
    lo, hi = _percentiles(diffs, level)
    return BootstrapResult(float(a.mean() - b.mean()), lo, hi, resamples, level)


def collapse_threshold(reference: float) -> float:
    """Half of the reference median, measured downward from it.

    For positive references this is ``0.5 * reference``; for non-positive
    ones the same 50% drop is taken below the reference, ``1.5 * reference``.
    """
    return reference - 0.5 * abs(reference)


def collapse_count(method_medians, reference_medians) -> int:
    """Settings where the method median falls below 50% of the reference median."""
    m = np.asarray(method_medians, dtype=np.float64)
    r = np.asarray(reference_medians, dtype=np.float64)
    if m.shape != r.shape:
        raise ValueError("medians must be aligned per setting")
    return int(sum(mi < collapse_threshold(ri) for mi, ri in zip(m, r)))
