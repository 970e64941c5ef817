"""Multi-fidelity toy environments.

Environments are stateful but batched: ``reset(rng, n)`` starts ``n``
independent episodes, and every later call acts on all rows at once.  A
single episode is simply ``n=1``.  Dynamics randomness always comes from the
generator passed to :meth:`Env.step`, so callers decide which stream each
environment consumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EnvUsageError(RuntimeError):
    """Stepping a finished episode, or stepping before reset."""


class StateError(ValueError):
    """A state handed to ``reset_to_state`` is outside the state space."""


@dataclass(frozen=True)
class Box:
    low: float
    high: float
    dim: int = 1


@dataclass(frozen=True)
class Discrete:
    n: int


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_space: Box | Discrete
    horizon: int
    gamma: float

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


class Env:
    """Shared bookkeeping: current states, time index and per-row done flags."""

    spec: EnvSpec

    def __init__(self):
        self.state: np.ndarray | None = None
        self.t = 0
        self.done: np.ndarray | None = None

    # subclasses provide these
    def _initial(self, rng, n) -> np.ndarray:
        raise NotImplementedError

    def _validate(self, states) -> np.ndarray:
        raise NotImplementedError

    def _transition(self, states, actions, rng):
        """Return ``(next_states, rewards, terminal)`` for every row."""
        raise NotImplementedError

    def reset(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        return self._start(self._initial(rng, n))

    def reset_to_state(self, states) -> np.ndarray:
        return self._start(self._validate(states))

    def _start(self, states):
        self.state = np.array(states, dtype=np.float64)
        self.t = 0
        self.done = np.zeros(len(self.state), dtype=bool)
        return self.state.copy()

    def overwrite_state(self, states, rows=None):
        """Replace the current state in place without restarting the episode clock."""
        states = self._validate(states)
        if rows is None:
            self.state = states
        else:
            self.state[rows] = states

    def observe(self) -> np.ndarray:
        return self.state.copy()

    def step(self, actions, rng: np.random.Generator):
        """Advance every row one step.

        Rows that already finished stay frozen and earn zero reward; stepping when
        every row has finished raises :class:`EnvUsageError`.
        """
        if self.state is None:
            raise EnvUsageError("step() before reset()")
        if self.done.all():
            raise EnvUsageError("step() after the episode is done")
        nxt, rew, terminal = self._transition(self.state, actions, rng)
        frozen = self.done
        if frozen.any():
            nxt[frozen] = self.state[frozen]
            rew = np.where(frozen, 0.0, rew)
        self.t += 1
        self.done = frozen | terminal | (self.t >= self.spec.horizon)
        self.state = nxt
        return nxt.copy(), rew, self.done.copy()


@dataclass(frozen=True)
class PointMassConfig:
    friction: float = 1.0
    gravity: float = 1.0
    dt: float = 0.1
    process_noise: float = 0.01
    goal: float = 1.0
    horizon: int = 50
    gamma: float = 0.97
    action_bound: float = 1.0
    position_bound: float = 5.0
    velocity_bound: float = 5.0
    init_spread: float = 0.1

    def __post_init__(self):
        if self.friction <= 0 or self.gravity <= 0:
            raise ValueError("friction and gravity multipliers must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


class PointMass(Env):
    """1-D point mass pushed toward a goal position.

    State ``(x, v)``; action is a force in ``[-action_bound, action_bound]``
    (clipped here, so the policy may emit any real).  The friction and gravity
    multipliers set the fidelity gap: the force is scaled by ``gravity`` and the
    velocity damping by ``friction``.
    """

    def __init__(self, config: PointMassConfig = PointMassConfig()):
        super().__init__()
        self.config = config
        self.spec = EnvSpec(2, Box(-config.action_bound, config.action_bound, 1),
                            config.horizon, config.gamma)

    def _initial(self, rng, n):
        x = rng.uniform(-self.config.init_spread, self.config.init_spread, size=n)
        return np.stack([x, np.zeros(n)], axis=1)

    def _validate(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        c = self.config
        if states.shape[1] != 2:
            raise StateError("point-mass states are (x, v) pairs")
        if (np.any(~np.isfinite(states)) or np.any(np.abs(states[:, 0]) > c.position_bound)
                or np.any(np.abs(states[:, 1]) > c.velocity_bound)):
            raise StateError("state outside the point-mass state box")
        return states.copy()

    def _transition(self, states, actions, rng):
        c = self.config
        n = len(states)
        a = np.asarray(actions, dtype=np.float64).reshape(n)
        a = np.minimum(np.maximum(a, -c.action_bound), c.action_bound)
        x, v = states[:, 0], states[:, 1]
        xi = rng.standard_normal(n)
        nxt = np.empty((n, 2))
        v2 = v + (a * c.gravity - c.friction * 0.5 * v) * c.dt + c.process_noise * xi
        v2 = np.minimum(np.maximum(v2, -c.velocity_bound), c.velocity_bound, out=nxt[:, 1])
        x2 = np.minimum(np.maximum(x + v2 * c.dt, -c.position_bound), c.position_bound,
                        out=nxt[:, 0])
        reward = -((x2 - c.goal) ** 2) - 0.01 * a * a
        return nxt, reward, np.zeros(n, dtype=bool)


@dataclass(frozen=True)
class SlipChainConfig:
    n_states: int = 5
    slip: float = 0.2
    goal: int | None = None
    horizon: int = 20
    gamma: float = 0.97

    def __post_init__(self):
        if self.n_states < 3:
            raise ValueError("a slip chain needs at least 3 states")
        if not 0.0 <= self.slip <= 1.0:
            raise ValueError("slip probability must lie in [0, 1]")
        if self.goal is not None and not 0 <= self.goal < self.n_states:
            raise ValueError("goal index must be < n_states")

    @property
    def goal_index(self) -> int:
        return self.n_states - 1 if self.goal is None else self.goal


class SlipChain(Env):
    """Chain of states observed one-hot; action 0 moves left, 1 moves right.

    The intended move happens with probability ``1 - slip``, otherwise the
    opposite move; moves are clamped at both ends.  Entering the goal pays 1 and
    ends the episode.
    """

    def __init__(self, config: SlipChainConfig = SlipChainConfig()):
        super().__init__()
        self.config = config
        self.spec = EnvSpec(config.n_states, Discrete(2), config.horizon, config.gamma)

    def encode(self, index) -> np.ndarray:
        return np.eye(self.config.n_states)[np.asarray(index, dtype=np.int64)]

    def index(self, states) -> np.ndarray:
        return np.argmax(np.atleast_2d(states), axis=1)

    def _initial(self, rng, n):
        return self.encode(np.zeros(n, dtype=np.int64))

    def _validate(self, states):
        arr = np.asarray(states)
        n = self.config.n_states
        if arr.ndim <= 1 and np.issubdtype(arr.dtype, np.integer):
            idx = np.atleast_1d(arr)
            if np.any(idx < 0) or np.any(idx >= n):
                raise StateError(f"state index outside 0..{n - 1}")
            return self.encode(idx)
        arr = np.atleast_2d(arr.astype(np.float64))
        if arr.shape[1] != n or np.any((arr != 0) & (arr != 1)) or np.any(arr.sum(axis=1) != 1):
            raise StateError("slip-chain states must be one-hot vectors")
        return arr.copy()

    def _transition(self, states, actions, rng):
        c = self.config
        idx = self.index(states)
        move = np.where(np.asarray(actions).reshape(len(states)) == 1, 1, -1)
        slipped = rng.random(len(states)) < c.slip
        move = np.where(slipped, -move, move)
        nxt = np.clip(idx + move, 0, c.n_states - 1)
        at_goal = nxt == c.goal_index
        return self.encode(nxt), at_goal.astype(np.float64), at_goal


class NegatedReward(Env):
    """Same dynamics as the wrapped environment, reward multiplied by -1."""

    def __init__(self, env: Env):
        self.inner = env
        self.spec = env.spec

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def reset(self, rng, n=1):
        return self.inner.reset(rng, n)

    def reset_to_state(self, states):
        return self.inner.reset_to_state(states)

    def overwrite_state(self, states, rows=None):
        self.inner.overwrite_state(states, rows)

    def observe(self):
        return self.inner.observe()

    def step(self, actions, rng):
        nxt, rew, done = self.inner.step(actions, rng)
        return nxt, -rew, done


def negate_reward(env: Env) -> Env:
    """Wrap ``env`` so its reward is negated; negating twice gives back ``env``."""
    return env.inner if isinstance(env, NegatedReward) else NegatedReward(env)


@dataclass
class MultiFidelityPair:
    high: Env
    low: Env

    def __post_init__(self):
        h, l = self.high.spec, self.low.spec
        if h != l:
            raise ValueError(f"fidelity pair specs differ: {h} vs {l}")

    @property
    def spec(self) -> EnvSpec:
        return self.high.spec


def point_mass_pair(high_friction=1.0, high_gravity=1.0, low_friction=1.0, low_gravity=1.0,
                    negate_low_reward=False, **kwargs) -> MultiFidelityPair:
    high = PointMass(PointMassConfig(friction=high_friction, gravity=high_gravity, **kwargs))
    low: Env = PointMass(PointMassConfig(friction=low_friction, gravity=low_gravity, **kwargs))
    if negate_low_reward:
        low = negate_reward(low)
    return MultiFidelityPair(high, low)


def slip_chain_pair(high_slip=0.2, low_slip=0.3, negate_low_reward=False, **kwargs) -> MultiFidelityPair:
    high = SlipChain(SlipChainConfig(slip=high_slip, **kwargs))
    low: Env = SlipChain(SlipChainConfig(slip=low_slip, **kwargs))
    if negate_low_reward:
        low = negate_reward(low)
    return MultiFidelityPair(high, low)
