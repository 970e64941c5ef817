"""Stochastic policies whose sampling is a deterministic function of pre-drawn noise.

Both policy families take the per-step noise outcome as an argument, so two
rollouts fed the same noise sequence pick actions the same way.  All methods
work on batches: ``states`` has shape ``(batch, obs_dim)``.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError

LOG_2PI = math.log(2.0 * math.pi)


class ZeroProbabilityError(ValueError):
    """An action with zero probability under the policy was scored."""


def _batch(states) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    return states[None, :] if states.ndim == 1 else states


class GaussianPolicy:
    """Diagonal Gaussian with state-dependent mean and log-std from one MLP trunk.

    The trunk maps ``obs_dim -> hidden -> 2 * act_dim``; the first half of the
    output is the mean, the second half the log-std, clamped to
    ``log_std_range``.
    """

    family = "gaussian"

    def __init__(self, obs_dim, act_dim, hidden=(64, 64), log_std_range=(-5.0, 2.0),
                 rng=None, params=None, dtype=np.float64):
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.hidden = tuple(hidden)
        self.log_std_range = tuple(float(v) for v in log_std_range)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = ad.init_mlp([self.obs_dim, *self.hidden, 2 * self.act_dim], rng, dtype)
        self.params = params

    @property
    def noise_dim(self) -> int:
        return self.act_dim

    def copy(self, params=None) -> "GaussianPolicy":
        params = params if params is not None else {k: v.copy() for k, v in self.params.items()}
        return GaussianPolicy(self.obs_dim, self.act_dim, self.hidden, self.log_std_range,
                              params=params)

    def sample_noise(self, rng: np.random.Generator, size) -> np.ndarray:
        size = (size,) if np.isscalar(size) else tuple(size)
        return rng.standard_normal(size + (self.act_dim,))

    def mean_std(self, states, out=None):
        out = ad.mlp_apply(self.params, _batch(states), out=out)
        lo, hi = self.log_std_range
        d = self.act_dim
        return out[:, :d], np.exp(np.minimum(np.maximum(out[:, d:], lo), hi))

    def act(self, states, noise, out=None) -> np.ndarray:
        """``mean(s) + std(s) * noise``; noise has shape ``(batch, act_dim)``.

        ``out``, if given, is one array per trunk layer that receives the layer
        outputs, so :meth:`log_prob` can reuse them.
        """
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape[-1] != self.act_dim:
            raise ContractError(f"noise has dimension {noise.shape[-1]}, expected {self.act_dim}")
        mu, std = self.mean_std(states, out)
        return mu + std * noise

    def act_deterministic(self, states) -> np.ndarray:
        return self.mean_std(states)[0]

    def log_prob(self, nodes: dict[str, ad.Node], states, actions, cache=None) -> ad.Node:
        """Differentiable log-density of ``actions`` (one per row), shape ``(batch,)``."""
        actions = np.asarray(actions, dtype=self.params["W0"].dtype).reshape(-1, self.act_dim)
        d = self.act_dim
        out = ad.mlp_forward(nodes, _batch(states), cache=cache)
        mu = ad.columns(out, 0, d)
        log_std = ad.clip(ad.columns(out, d, 2 * d), *self.log_std_range)
        z = ad.mul(ad.sub(actions, mu), ad.exp(ad.neg(log_std)))
        per_dim = ad.add(ad.mul(ad.square(z), -0.5), ad.neg(log_std))
        return ad.add(ad.reduce_sum(per_dim, axis=1), -0.5 * d * LOG_2PI)

    def log_prob_value(self, states, actions) -> np.ndarray:
        mu, std = self.mean_std(states)
        actions = np.asarray(actions, dtype=np.float64).reshape(mu.shape)
        z = (actions - mu) / std
        return np.sum(-0.5 * z * z - np.log(std), axis=1) - 0.5 * self.act_dim * LOG_2PI


class CategoricalPolicy:
    """Softmax over ``n_actions`` logits; sampling uses the Gumbel-max trick.

    The noise for one step is one Uniform(0, 1) draw per action class.
    """

    family = "categorical"

    def __init__(self, obs_dim, n_actions, hidden=(64, 64), rng=None, params=None,
                 dtype=np.float64):
        self.obs_dim, self.n_actions = int(obs_dim), int(n_actions)
        self.hidden = tuple(hidden)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = ad.init_mlp([self.obs_dim, *self.hidden, self.n_actions], rng, dtype)
        self.params = params

    @property
    def noise_dim(self) -> int:
        return self.n_actions

    def copy(self, params=None) -> "CategoricalPolicy":
        params = params if params is not None else {k: v.copy() for k, v in self.params.items()}
        return CategoricalPolicy(self.obs_dim, self.n_actions, self.hidden, params=params)

    def sample_noise(self, rng: np.random.Generator, size) -> np.ndarray:
        size = (size,) if np.isscalar(size) else tuple(size)
        return rng.random(size + (self.n_actions,))

    def logits(self, states, out=None) -> np.ndarray:
        return ad.mlp_apply(self.params, _batch(states), out=out)

    def log_probs(self, states, out=None) -> np.ndarray:
        z = self.logits(states, out)
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def probs(self, states) -> np.ndarray:
        return np.exp(self.log_probs(states))

    def act(self, states, noise, out=None) -> np.ndarray:
        """argmax of log-softmax plus Gumbel(u) = -log(-log u), per row."""
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape[-1] != self.n_actions:
            raise ContractError(f"noise has dimension {noise.shape[-1]}, expected {self.n_actions}")
        with np.errstate(divide="ignore"):
            gumbel = -np.log(-np.log(noise))
        return np.argmax(self.log_probs(states, out) + gumbel, axis=1)

    def act_deterministic(self, states) -> np.ndarray:
        # np.argmax returns the lowest index among ties
        return np.argmax(self.logits(states), axis=1)

    def _check_actions(self, actions) -> np.ndarray:
        actions = np.asarray(actions).reshape(-1)
        if np.any((actions < 0) | (actions >= self.n_actions)) or np.any(actions != np.round(actions)):
            raise ContractError("action outside the discrete action space")
        return actions.astype(np.int64)

    def log_prob(self, nodes: dict[str, ad.Node], states, actions, cache=None) -> ad.Node:
        actions = self._check_actions(actions)
        out = ad.take(ad.log_softmax(ad.mlp_forward(nodes, _batch(states), cache=cache)), actions)
        if np.any(np.isneginf(out.value)):
            raise ZeroProbabilityError("action has zero probability")
        return out

    def log_prob_value(self, states, actions) -> np.ndarray:
        actions = self._check_actions(actions)
        return self.log_probs(states)[np.arange(actions.size), actions]


class ValueNetwork:
    """State-value regressor ``obs_dim -> hidden -> 1`` with a linear output."""

    def __init__(self, obs_dim, hidden=(64, 64), rng=None, params=None, dtype=np.float64):
        self.obs_dim = int(obs_dim)
        self.hidden = tuple(hidden)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = ad.init_mlp([self.obs_dim, *self.hidden, 1], rng, dtype)
        self.params = params

    def copy(self, params=None) -> "ValueNetwork":
        params = params if params is not None else {k: v.copy() for k, v in self.params.items()}
        return ValueNetwork(self.obs_dim, self.hidden, params=params)

    def __call__(self, states) -> np.ndarray:
        return ad.mlp_apply(self.params, _batch(states))[:, 0]

    def value(self, nodes: dict[str, ad.Node], states) -> ad.Node:
        out = ad.mlp_forward(nodes, _batch(states))
        return ad.reshape(out, (out.shape[0],))


def make_policy(spec, hidden=(64, 64), rng=None, log_std_range=(-5.0, 2.0), dtype=np.float64):
    """Pick the policy family that matches an environment's action space."""
    from .envs import Box

    if isinstance(spec.action_space, Box):
        return GaussianPolicy(spec.obs_dim, spec.action_space.dim, hidden, log_std_range, rng=rng,
                              dtype=dtype)
    return CategoricalPolicy(spec.obs_dim, spec.action_space.n, hidden, rng=rng, dtype=dtype)
