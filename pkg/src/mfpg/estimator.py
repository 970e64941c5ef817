"""Control-variate policy-gradient estimator.

Per trajectory the REINFORCE random variable is

    X = (1/T) * sum_t (G_t - V(s_t)) * log pi(a_t | s_t)

with ``V`` held constant.  The multi-fidelity surrogate is

    Z = mean_i [X_high_i + c * (X_low_i - mu_low)]

where ``mu_low`` averages X over the extra uncorrelated low-fidelity batch and
``c`` comes from running (EMA) estimates of the correlation and the two
standard deviations: ``c = -rho * s_high / s_low``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .sampler import TrajectoryBatch


def returns_to_go(rewards, gamma: float) -> np.ndarray:
    """``G_t = sum_{n >= t} gamma^(n-t) r_n`` along the last axis, by backward recursion."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        acc = rewards[..., t] + gamma * acc
        out[..., t] = acc
    return out


@dataclass
class TrajectoryLoss:
    """Per-trajectory X values for a batch.

    ``node`` is differentiable with shape ``(n,)``; ``value`` is its detached copy.
    ``terms`` holds the detached per-step summands, so ``terms.sum(1) == value``.
    """

    node: ad.Node
    value: np.ndarray
    terms: np.ndarray
    mask: np.ndarray


def advantages(batch: TrajectoryBatch, gamma: float, value_fn=None) -> np.ndarray:
    g = returns_to_go(batch.rewards, gamma)
    if value_fn is not None:
        n, horizon = g.shape
        flat = batch.states[:, :horizon].reshape(n * horizon, -1)
        g = g - value_fn(flat).reshape(n, horizon)
    return np.where(batch.mask, g, 0.0)


def trajectory_loss(policy, nodes: dict[str, ad.Node], batch: TrajectoryBatch, gamma: float,
                    value_fn=None) -> TrajectoryLoss:
    """X for every trajectory in ``batch``; ``value_fn=None`` disables the baseline."""
    n, horizon = batch.rewards.shape
    if batch.states.shape[1] != horizon + 1 or batch.mask.shape != (n, horizon):
        raise ValueError("trajectory arrays have inconsistent lengths")
    weights = advantages(batch, gamma, value_fn) / horizon
    # rows are flattened time-major, matching the activations recorded in rollouts
    states = batch.states[:, :horizon].swapaxes(0, 1).reshape(horizon * n, -1)
    actions = batch.actions.swapaxes(0, 1).reshape(horizon * n, -1)
    if actions.shape[1] == 1 and policy.family == "categorical":
        actions = actions[:, 0]
    logp = policy.log_prob(nodes, states, actions, cache=batch.cached_activations(policy))
    weighted = ad.mul(logp, weights.T.reshape(-1))
    node = ad.reduce_sum(ad.reshape(weighted, (horizon, n)), axis=0)
    terms = weighted.value.reshape(horizon, n).T
    return TrajectoryLoss(node, node.value.copy(), terms, batch.mask)


def batch_statistics(x_high, x_low) -> tuple[float, float, float]:
    """Pearson correlation and sample standard deviations (ddof=1) of paired values.

    If either side has zero variance the correlation is reported as 0.
    """
    x_high = np.asarray(x_high, dtype=np.float64).ravel()
    x_low = np.asarray(x_low, dtype=np.float64).ravel()
    if x_high.shape != x_low.shape or x_high.size < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    dh = x_high - x_high.mean()
    dl = x_low - x_low.mean()
    ssh, ssl = float(dh @ dh), float(dl @ dl)
    n1 = x_high.size - 1
    s_high, s_low = math.sqrt(ssh / n1), math.sqrt(ssl / n1)
    if ssh == 0.0 or ssl == 0.0:
        return 0.0, s_high, s_low
    rho = float(dh @ dl) / math.sqrt(ssh * ssl)
    return min(1.0, max(-1.0, rho)), s_high, s_low


def paired_statistics(xh: TrajectoryLoss, xl: TrajectoryLoss, unit: str = "trajectory"):
    """Batch statistics at trajectory granularity, or over paired per-step terms.

    ``unit="transition"`` pairs the step-``t`` summand of high trajectory ``i`` with
    the step-``t`` summand of its low partner, keeping steps where both episodes
    are still running.
    """
    if unit == "trajectory":
        return batch_statistics(xh.value, xl.value)
    if unit == "transition":
        both = xh.mask & xl.mask
        return batch_statistics(xh.terms[both], xl.terms[both])
    raise ValueError(f"unknown statistics unit {unit!r}")


@dataclass(frozen=True)
class CvTracker:
    """Exponential moving averages of rho, s_high and s_low."""

    eta: float = 0.95
    rho: float = 0.0
    s_high: float = 0.0
    s_low: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError("moving-average weight must lie in (0, 1)")

    def update(self, rho: float, s_high: float, s_low: float) -> "CvTracker":
        if not self.initialized:
            return replace(self, rho=rho, s_high=s_high, s_low=s_low, initialized=True)
        e = self.eta
        return replace(
            self,
            rho=min(1.0, max(-1.0, e * self.rho + (1.0 - e) * rho)),
            s_high=e * self.s_high + (1.0 - e) * s_high,
            s_low=e * self.s_low + (1.0 - e) * s_low,
        )


def ema_update(tracker: CvTracker, stats) -> CvTracker:
    return tracker.update(*stats)


def cv_coefficient(tracker: CvTracker) -> float:
    """``-rho * s_high / s_low``; 0 when the tracker is empty or ``s_low`` is 0."""
    if not tracker.initialized or tracker.s_low == 0.0:
        return 0.0
    return -tracker.rho * tracker.s_high / tracker.s_low


def low_mean(x_uncorr: TrajectoryLoss) -> ad.Node:
    """Differentiable mean of X over the uncorrelated low-fidelity batch."""
    return ad.mean(x_uncorr.node)


def mfpg_surrogate(x_high: TrajectoryLoss, x_low: TrajectoryLoss | None, mu_low: ad.Node | None,
                   c: float, drop_negative_rho: bool = False,
                   rho_batch: float | None = None) -> ad.Node:
    """``mean(X_high) + c * (mean(X_low) - mu_low)``.

    The control-variate term is left out entirely when ``c == 0`` or when
    ``drop_negative_rho`` is set and ``rho_batch < 0``; the result is then the
    high-fidelity-only loss itself.
    """
    if len(x_high.value) == 0:
        raise ValueError("empty high-fidelity batch")
    base = ad.mean(x_high.node)
    if x_low is None or mu_low is None or c == 0.0:
        return base
    if len(x_low.value) != len(x_high.value):
        raise ValueError("correlated batches must pair up one-to-one")
    if drop_negative_rho and rho_batch is not None and rho_batch < 0:
        return base
    return ad.add(base, ad.mul(ad.sub(ad.mean(x_low.node), mu_low), c))
