"""Deterministic-policy evaluation, evaluation curves and the estimator-variance harness."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Env, MultiFidelityPair
from .estimator import advantages, batch_statistics
from .rng import Streams
from .sampler import sample_correlated_pairs, sample_high, sample_uncorrelated
from .stats import auc, final_return


def evaluate(policy, env: Env, episodes: int = 10, rng: np.random.Generator | None = None):
    """Run ``episodes`` rollouts with the deterministic action; returns ``(mean, per_episode)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    s = env.reset(rng, episodes)
    total = np.zeros(episodes)
    for _ in range(env.spec.horizon):
        s, r, done = env.step(policy.act_deterministic(s), rng)
        total += r
        if done.all():
            break
    return float(total.mean()), total


@dataclass
class EvalCurve:
    steps: list = field(default_factory=list)
    means: list = field(default_factory=list)
    episodes: list = field(default_factory=list)

    def append(self, step: int, episode_returns) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("evaluation steps must be strictly increasing")
        episode_returns = np.asarray(episode_returns, dtype=np.float64)
        self.steps.append(int(step))
        self.means.append(float(episode_returns.mean()))
        self.episodes.append(episode_returns)

    def __len__(self):
        return len(self.steps)

    def final_return(self, window: int = 20) -> float:
        return final_return(self.means, window)

    def auc(self) -> float:
        # a run too short for any update has only the step-0 point, which spans no area
        if len(self.steps) == 1:
            return 0.0
        return auc(self.steps, self.means)


def trajectory_values(policy, batch, gamma: float, value_fn=None) -> np.ndarray:
    """Detached X per trajectory (no graph is built)."""
    n, horizon = batch.rewards.shape
    weights = advantages(batch, gamma, value_fn) / horizon
    states = batch.states[:, :horizon].reshape(n * horizon, -1)
    actions = batch.actions.reshape(n * horizon, -1)
    if policy.family == "categorical":
        actions = actions[:, 0]
    logp = policy.log_prob_value(states, actions).reshape(n, horizon)
    return (logp * weights).sum(axis=1)


@dataclass(frozen=True)
class VarianceVariant:
    """One estimator in the variance study: ``kind`` is ``hf-only`` or ``mfpg``."""

    kind: str
    batch_transitions: int
    baseline: bool = True

    @property
    def label(self) -> str:
        tag = "baseline" if self.baseline else "plain"
        return f"{self.kind}/{self.batch_transitions}/{tag}"


def variance_study(checkpoints, pair: MultiFidelityPair, variants, repeats: int = 200,
                   rng=0, low_multiplier: int = 90, gamma: float = 0.97,
                   low_mean: str = "per-batch") -> list[dict]:
    """Empirical variance of the scalar loss (X or Z, before differentiation).

    ``checkpoints`` is a sequence of ``(step, policy, value_net)``.  For every
    checkpoint and variant, ``repeats`` independent batches are drawn and the
    variance of the batch-level scalar recorded.  The mfpg coefficient is the
    optimal one estimated from all repeats pooled at that checkpoint.  Each row
    also carries ``ratio``: mfpg variance over the hf-only variance at the same
    batch size and baseline setting, where that hf-only variant is present.

    ``low_mean="pooled"`` replaces each batch's own low-fidelity mean by the
    mean over all repeats, which isolates the variance of the coupled part (the
    mean is then effectively known).
    """
    if low_mean not in ("per-batch", "pooled"):
        raise ValueError("low_mean must be 'per-batch' or 'pooled'")
    if not checkpoints:
        raise ValueError("variance study needs at least one checkpoint")
    horizon = pair.spec.horizon
    rows = []
    for step, policy, value_net in checkpoints:
        for j, var in enumerate(variants):
            streams = Streams(int(np.random.SeedSequence([int(rng), int(step), j]).generate_state(1)[0]))
            n_traj = -(-var.batch_transitions // horizon)
            vf = value_net if var.baseline else None
            scalars = _variant_scalars(policy, pair, var, n_traj, repeats, streams, vf, gamma,
                                       low_multiplier, low_mean == "pooled")
            rows.append({"step": int(step), "variant": var.label, "kind": var.kind,
                         "batch_transitions": var.batch_transitions, "baseline": var.baseline,
                         "variance": float(np.var(scalars, ddof=1)), "repeats": repeats})
    for row in rows:
        row["ratio"] = ""
        if row["kind"] == "mfpg":
            ref = [r for r in rows if r["kind"] == "hf-only" and r["step"] == row["step"]
                   and r["batch_transitions"] == row["batch_transitions"]
                   and r["baseline"] == row["baseline"]]
            if ref and ref[0]["variance"] > 0:
                row["ratio"] = row["variance"] / ref[0]["variance"]
    return rows


def _variant_scalars(policy, pair, var, n_traj, repeats, streams, vf, gamma, low_multiplier,
                     pooled_mean=False):
    if var.kind == "hf-only":
        return np.array([trajectory_values(policy, sample_high(policy, pair.high, n_traj, streams),
                                           gamma, vf).mean() for _ in range(repeats)])
    if var.kind != "mfpg":
        raise ValueError(f"unknown estimator kind {var.kind!r}")
    xh, xl, mu = [], [], []
    for _ in range(repeats):
        corr = sample_correlated_pairs(policy, pair, n_traj, streams)
        un = sample_uncorrelated(policy, pair.low, n_traj * low_multiplier, streams)
        xh.append(trajectory_values(policy, corr.high, gamma, vf))
        xl.append(trajectory_values(policy, corr.low, gamma, vf))
        mu.append(trajectory_values(policy, un, gamma, vf).mean())
    rho, s_high, s_low = batch_statistics(np.concatenate(xh), np.concatenate(xl))
    c = 0.0 if s_low == 0.0 else -rho * s_high / s_low
    if pooled_mean:
        mu = [float(np.mean(mu))] * repeats
    return np.array([h.mean() + c * (l.mean() - m) for h, l, m in zip(xh, xl, mu)])
