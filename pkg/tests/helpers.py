"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np


def central_difference(fn, params: dict, h: float = 1e-5) -> dict:
    """Numerical gradient of scalar ``fn(params)`` by central differences, coordinate by coordinate."""
    grads = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            up = fn(params)
            v[idx] = old - h
            down = fn(params)
            v[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads[k] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    worst = 0.0
    for k in numeric:
        n = numeric[k]
        a = analytic.get(k, np.zeros_like(n))  # unreached leaves get no entry
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def returns_to_go_quadratic(rewards, gamma):
    """O(T^2) double loop, the definition written out."""
    rewards = np.asarray(rewards, dtype=float)
    T = rewards.shape[-1]
    out = np.zeros_like(rewards)
    for t in range(T):
        for n in range(t, T):
            out[..., t] += gamma ** (n - t) * rewards[..., n]
    return out


def pearson_direct(x, y):
    """Pearson correlation from the textbook sums."""
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5
