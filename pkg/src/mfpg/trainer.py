"""REINFORCE training loop with the multi-fidelity control-variate estimator."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .envs import MultiFidelityPair
from .estimator import (CvTracker, cv_coefficient, low_mean, mfpg_surrogate, paired_statistics,
                        returns_to_go, trajectory_loss)
from .evaluation import EvalCurve, evaluate
from .policy import ValueNetwork, make_policy
from .rng import Streams
from .sampler import sample_high, sample_low_combined, sample_uncorrelated

log = logging.getLogger(__name__)

MODES = ("mfpg", "hf-only", "lf-only", "mfpg-no-reparam")


class TrainingAborted(RuntimeError):
    """The loss or a gradient went non-finite; ``records`` holds the history so far."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass
class TrainerConfig:
    mode: str = "mfpg"
    batch_transitions: int = 100
    low_multiplier: int = 90
    lf_only_multiplier: int = 100
    learning_rate: float = 7e-4
    lr_decay: float = 0.0
    gamma: float = 0.97
    eta_ma: float = 0.95
    vf_coef: float = 1.0
    max_grad_norm: float = 1.0
    budget: int = 200_000
    eval_interval: int = 1000
    eval_episodes: int = 10
    hidden: tuple = (64, 64)
    log_std_range: tuple = (-5.0, 2.0)
    use_baseline: bool = True
    drop_negative_rho: bool = True
    cv_unit: str = "trajectory"
    reconstrain_period: int | None = None
    fixed_c: float | None = None
    checkpoint_steps: tuple = ()
    dtype: str = "float64"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_transitions < 1:
            raise ValueError("batch_transitions must be >= 1")
        if self.cv_unit not in ("trajectory", "transition"):
            raise ValueError("cv_unit must be 'trajectory' or 'transition'")
        if self.reconstrain_period is not None and self.reconstrain_period < 1:
            raise ValueError("reconstrain_period must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        self.hidden = tuple(self.hidden)
        self.log_std_range = tuple(self.log_std_range)
        self.checkpoint_steps = tuple(sorted(self.checkpoint_steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["log_std_range"] = list(self.log_std_range)
        d["checkpoint_steps"] = list(self.checkpoint_steps)
        return d


@dataclass
class IterationRecord:
    iteration: int
    hf_steps: int
    surrogate: float
    hf_only: float
    rho_batch: float
    rho_ema: float
    s_high: float
    s_low: float
    c_star: float
    cv_applied: bool
    value_loss: float
    grad_norm: float


@dataclass
class Checkpoint:
    step: int
    policy_params: dict
    value_params: dict


@dataclass
class TrainResult:
    policy: object
    value: ValueNetwork
    curve: EvalCurve
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    hf_steps: int = 0


def _value_fit(value: ValueNetwork, state: ad.AdamState, batch, gamma, cfg: TrainerConfig, lr):
    n, horizon = batch.rewards.shape
    targets = returns_to_go(batch.rewards, gamma)[batch.mask]
    states = batch.states[:, :horizon][batch.mask]
    nodes = ad.parameters(value.params)
    err = ad.sub(value.value(nodes, states), targets)
    loss = ad.mul(ad.mean(ad.square(err)), cfg.vf_coef)
    grads = ad.backward(loss)
    params, state = ad.adam_step(value.params, grads, state, lr, cfg.max_grad_norm)
    return params, state, loss.item()


def _snapshot(step, policy, value):
    return Checkpoint(step, {k: v.copy() for k, v in policy.params.items()},
                      {k: v.copy() for k, v in value.params.items()})


def train(config: TrainerConfig, pair: MultiFidelityPair, seed: int) -> TrainResult:
    """Run REINFORCE on ``pair.high`` under ``config``'s high-fidelity step budget.

    Every iteration collects ``ceil(batch_transitions / T)`` high-fidelity
    trajectories (plus, for mfpg modes, their coupled low partners and
    ``low_multiplier`` times as many uncorrelated low trajectories), takes one
    Adam step on the negated surrogate, then one Adam step on the value
    regression.  The policy is evaluated deterministically in the high
    environment at step 0 and every ``eval_interval`` high-fidelity steps.
    """
    cfg = config
    spec = pair.spec
    streams = Streams(seed)
    init_rng = streams["params"]
    dtype = np.dtype(cfg.dtype)
    policy = make_policy(spec, cfg.hidden, init_rng, cfg.log_std_range, dtype)
    value = ValueNetwork(spec.obs_dim, cfg.hidden, rng=init_rng, dtype=dtype)
    pi_opt, vf_opt = ad.adam_init(policy.params), ad.adam_init(value.params)
    tracker = CvTracker(cfg.eta_ma)
    horizon = spec.horizon
    n_traj = -(-cfg.batch_transitions // horizon)
    per_iter = n_traj * horizon
    result = TrainResult(policy, value, EvalCurve())

    eval_rng = streams["eval"]
    result.curve.append(0, evaluate(policy, pair.high, cfg.eval_episodes, eval_rng)[1])
    next_eval = cfg.eval_interval
    pending_ckpt = list(cfg.checkpoint_steps)
    if pending_ckpt and pending_ckpt[0] == 0:
        result.checkpoints.append(_snapshot(0, policy, value))
        pending_ckpt.pop(0)

    steps, k = 0, 0
    uses_low = cfg.mode in ("mfpg", "mfpg-no-reparam")
    while steps + per_iter <= cfg.budget:
        lr = cfg.learning_rate / (1.0 + cfg.lr_decay * k)
        nodes = ad.parameters(policy.params)
        vf = value if cfg.use_baseline else None
        rho_b, s_h, s_l, c, applied = math.nan, math.nan, math.nan, 0.0, False

        if cfg.mode == "lf-only":
            batch = sample_uncorrelated(policy, pair.low, n_traj * cfg.lf_only_multiplier, streams)
            xh = trajectory_loss(policy, nodes, batch, spec.gamma, vf)
            surrogate = ad.mean(xh.node)
            fit_batch = batch
            steps += per_iter
        else:
            high = sample_high(policy, pair.high, n_traj, streams)
            steps += high.n_steps
            xh = trajectory_loss(policy, nodes, high, spec.gamma, vf)
            surrogate = ad.mean(xh.node)
            fit_batch = high
            if uses_low:
                low, uncorr = sample_low_combined(
                    policy, pair.low, high, n_traj * cfg.low_multiplier, streams,
                    shared_noise=cfg.mode == "mfpg", reconstrain_period=cfg.reconstrain_period)
                xl = trajectory_loss(policy, nodes, low, spec.gamma, vf)
                xu = trajectory_loss(policy, nodes, uncorr, spec.gamma, vf)
                rho_b, s_h, s_l = paired_statistics(xh, xl, cfg.cv_unit)
                degenerate = s_h == 0.0 or s_l == 0.0
                tracker = tracker.update(rho_b, s_h, s_l)
                c = cfg.fixed_c if cfg.fixed_c is not None else cv_coefficient(tracker)
                if degenerate and cfg.fixed_c is None:
                    c = 0.0
                surrogate = mfpg_surrogate(xh, xl, low_mean(xu), c, cfg.drop_negative_rho, rho_b)
                applied = c != 0.0 and not (cfg.drop_negative_rho and rho_b < 0)

        # same reduction as inside the surrogate, so a dropped CV term reads back bit-equal
        hf_only_value = ad.mean(xh.node).item()
        z = surrogate.item()
        if not math.isfinite(z):
            raise TrainingAborted(f"non-finite surrogate at iteration {k}", result.records)
        grads = ad.backward(ad.neg(surrogate))
        grad_norm = ad.global_norm(grads)
        try:
            if lr > 0:
                policy.params, pi_opt = ad.adam_step(policy.params, grads, pi_opt, lr,
                                                     cfg.max_grad_norm)
            vloss = math.nan
            if cfg.use_baseline and lr > 0:
                value.params, vf_opt, vloss = _value_fit(value, vf_opt, fit_batch, spec.gamma, cfg, lr)
        except ad.NonFiniteGradientError as exc:
            raise TrainingAborted(f"iteration {k}: {exc}", result.records) from exc

        result.records.append(IterationRecord(
            k, steps, z, hf_only_value, rho_b, tracker.rho if tracker.initialized else math.nan,
            tracker.s_high if tracker.initialized else math.nan,
            tracker.s_low if tracker.initialized else math.nan, c, applied, vloss, grad_norm))
        k += 1
        while pending_ckpt and steps >= pending_ckpt[0]:
            result.checkpoints.append(_snapshot(steps, policy, value))
            pending_ckpt.pop(0)
        if steps >= next_eval:
            result.curve.append(steps, evaluate(policy, pair.high, cfg.eval_episodes, eval_rng)[1])
            while next_eval <= steps:
                next_eval += cfg.eval_interval
        if k % 200 == 0:
            log.debug("seed %s iter %d steps %d eval %.3f", seed, k, steps, result.curve.means[-1])

    result.hf_steps = steps
    return result
