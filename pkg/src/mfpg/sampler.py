"""Trajectory collection, including correlated high/low rollouts.

A correlated pair shares two things: the initial state (the low environment is
reset to the state the high environment started in) and the whole sequence of
per-step action-noise outcomes.  Transition randomness stays independent: the
high and low environments draw from different streams.

Stream names used here: ``init``, ``policy``, ``high`` for high-fidelity
rollouts; ``low`` for correlated low-fidelity transitions; ``low_init``,
``low_policy``, ``low_uncorr`` for the extra uncorrelated low-fidelity batch;
``low_fresh`` for the noise of the uncoupled ablation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .envs import Env, MultiFidelityPair
from .rng import Streams, as_streams


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1, obs_dim)
    actions: np.ndarray  # (T, act_dim) or (T,) for discrete actions
    rewards: np.ndarray  # (T,)
    noise: np.ndarray  # (T, noise_dim)
    mask: np.ndarray  # (T,) True while the episode is running
    fidelity: str

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())


@dataclass
class TrajectoryBatch:
    """``n`` trajectories of a common horizon stored as stacked arrays."""

    states: np.ndarray  # (n, T + 1, obs_dim)
    actions: np.ndarray
    rewards: np.ndarray  # (n, T)
    noise: np.ndarray  # (n, T, noise_dim)
    mask: np.ndarray  # (n, T)
    fidelity: str
    biased: bool = False
    # per-layer policy activations recorded while acting, time-major (T, n, width),
    # valid only for the parameter dict in ``activations_for``
    activations: list | None = field(default=None, repr=False)
    activations_for: dict | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.rewards)

    def __getitem__(self, i) -> Trajectory:
        return Trajectory(self.states[i], self.actions[i], self.rewards[i], self.noise[i],
                          self.mask[i], self.fidelity)

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    @property
    def n_steps(self) -> int:
        """Environment steps actually taken (frozen rows after termination excluded)."""
        return int(self.mask.sum())

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def rows(self, index) -> "TrajectoryBatch":
        acts = None if self.activations is None else [a[:, index] for a in self.activations]
        return TrajectoryBatch(self.states[index], self.actions[index], self.rewards[index],
                               self.noise[index], self.mask[index], self.fidelity, self.biased,
                               acts, self.activations_for)

    def cached_activations(self, policy):
        """Recorded layer outputs flattened time-major to ``(T * n, width)``, or None if stale."""
        if self.activations is None or self.activations_for is not policy.params:
            return None
        n, horizon = self.rewards.shape
        return [a.reshape(horizon * n, -1) for a in self.activations]


@dataclass
class CorrelatedPair:
    high: Trajectory
    low: Trajectory


@dataclass
class CorrelatedBatch:
    high: TrajectoryBatch
    low: TrajectoryBatch
    biased: bool = False

    def __len__(self):
        return len(self.high)

    def __getitem__(self, i) -> CorrelatedPair:
        return CorrelatedPair(self.high[i], self.low[i])


@dataclass
class _Reconstrain:
    period: int
    target_states: np.ndarray  # (rows, T + 1, obs_dim)
    rows: np.ndarray = field(default=None)


def rollout(policy, env: Env, noise: np.ndarray, trans_rng: np.random.Generator, *,
            init_rng: np.random.Generator | None = None, init_states=None,
            fidelity: str = "high", reconstrain: _Reconstrain | None = None) -> TrajectoryBatch:
    """Roll ``len(noise)`` episodes of ``env`` with actions ``policy.act(s, noise[:, t])``.

    Starts from ``init_states`` if given, else from ``env.reset(init_rng, n)``.
    """
    n, horizon = noise.shape[0], env.spec.horizon
    if noise.shape[1] < horizon:
        raise ValueError("noise sequence shorter than the horizon")
    s = env.reset(init_rng, n) if init_states is None else env.reset_to_state(init_states)
    states = np.empty((n, horizon + 1, s.shape[1]))
    states[:, 0] = s
    rewards = np.zeros((n, horizon))
    mask = np.zeros((n, horizon), dtype=bool)
    actions = []
    dtype = policy.params["W0"].dtype
    layers = [np.empty((horizon, n, w), dtype) for w in ad.layer_widths(policy.params)]
    complete = True
    alive = np.ones(n, dtype=bool)
    for t in range(horizon):
        a = policy.act(s, noise[:, t], out=[buf[t] for buf in layers])
        actions.append(a)
        mask[:, t] = alive
        s, r, done = env.step(a, trans_rng)
        rewards[:, t] = r
        if reconstrain is not None and (t + 1) % reconstrain.period == 0:
            env.overwrite_state(reconstrain.target_states[:, t + 1], reconstrain.rows)
            s = env.observe()
        states[:, t + 1] = s
        alive = ~done
        if done.all():
            # remaining steps are padding
            for _ in range(t + 1, horizon):
                actions.append(np.zeros_like(a))
            states[:, t + 2:] = s[:, None, :]
            complete = t == horizon - 1
            break
    return TrajectoryBatch(states, np.stack(actions, axis=1), rewards, noise[:, :horizon],
                           mask, fidelity, activations=layers if complete else None,
                           activations_for=policy.params)


def sample_high(policy, env: Env, n: int, rng) -> TrajectoryBatch:
    """High-fidelity half of the correlated sampler (also the high-fidelity-only sampler)."""
    streams = as_streams(rng)
    noise = policy.sample_noise(streams["policy"], (n, env.spec.horizon))
    return rollout(policy, env, noise, streams["high"], init_rng=streams["init"])


def sample_correlated_pairs(policy, pair: MultiFidelityPair, n: int, rng, *,
                            shared_noise: bool = True) -> CorrelatedBatch:
    """Collect ``n`` coupled (high, low) trajectory pairs.

    With ``shared_noise=False`` the low rollouts get fresh action noise (only the
    initial state stays coupled); this is the no-reparameterization ablation.
    """
    if n < 1:
        raise ValueError("need at least one correlated pair")
    streams = as_streams(rng)
    high = sample_high(policy, pair.high, n, streams)
    noise = high.noise if shared_noise else policy.sample_noise(
        streams["low_fresh"], high.noise.shape[:2])
    low = rollout(policy, pair.low, noise, streams["low"], init_states=high.states[:, 0],
                  fidelity="low")
    return CorrelatedBatch(high, low)


def sample_with_reconstraining(policy, pair: MultiFidelityPair, n: int, period: int, rng, *,
                               shared_noise: bool = True) -> CorrelatedBatch:
    """Correlated pairs whose low state is snapped back to the high state every ``period`` steps.

    This couples the pair more tightly but biases the low-fidelity estimate, so
    the batch is flagged ``biased``.
    """
    if period < 1:
        raise ValueError("reconstraining period must be >= 1")
    streams = as_streams(rng)
    high = sample_high(policy, pair.high, n, streams)
    noise = high.noise if shared_noise else policy.sample_noise(
        streams["low_fresh"], high.noise.shape[:2])
    low = rollout(policy, pair.low, noise, streams["low"], init_states=high.states[:, 0],
                  fidelity="low", reconstrain=_Reconstrain(period, high.states))
    low.biased = True
    return CorrelatedBatch(high, low, biased=True)


def sample_uncorrelated(policy, env: Env, n: int, rng) -> TrajectoryBatch:
    """Independent low-fidelity rollouts: fresh initial states and fresh noise."""
    streams = as_streams(rng)
    horizon = env.spec.horizon
    noise = policy.sample_noise(streams["low_policy"], (n, horizon))
    if n == 0:
        obs = env.spec.obs_dim
        return TrajectoryBatch(np.zeros((0, horizon + 1, obs)), np.zeros((0, horizon)),
                               np.zeros((0, horizon)), noise, np.zeros((0, horizon), bool), "low")
    return rollout(policy, env, noise, streams["low_uncorr"], init_rng=streams["low_init"],
                   fidelity="low")


def sample_low_combined(policy, env: Env, high: TrajectoryBatch, n_uncorr: int, streams: Streams,
                        *, shared_noise=True, reconstrain_period=None):
    """Correlated low rollouts for ``high`` and ``n_uncorr`` uncorrelated ones in one batch.

    Equivalent in distribution to :func:`sample_correlated_pairs` (low half) plus
    :func:`sample_uncorrelated`, but the policy is evaluated once per step for
    all rows.  Returns ``(correlated_low, uncorrelated)``.
    """
    n_corr, horizon = len(high), env.spec.horizon
    corr_noise = high.noise if shared_noise else policy.sample_noise(
        streams["low_fresh"], high.noise.shape[:2])
    un_noise = policy.sample_noise(streams["low_policy"], (n_uncorr, horizon))
    un_init = env.reset(streams["low_init"], n_uncorr) if n_uncorr else np.zeros((0, env.spec.obs_dim))
    noise = np.concatenate([corr_noise, un_noise])
    init = np.concatenate([high.states[:, 0], un_init])
    reconstrain = None
    if reconstrain_period is not None:
        reconstrain = _Reconstrain(reconstrain_period, high.states, rows=np.arange(n_corr))
    batch = rollout(policy, env, noise, streams["low"], init_states=init, fidelity="low",
                    reconstrain=reconstrain)
    corr = batch.rows(slice(0, n_corr))
    corr.biased = reconstrain is not None
    return corr, batch.rows(slice(n_corr, None))
