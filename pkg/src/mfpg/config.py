"""Experiment configuration files.

A configuration is a TOML document.  Every section and key is optional
except ``experiment.seeds``; omitted values take the defaults shown here::

    [experiment]
    name = "pointmass-mild"      # free-form label copied into the manifest
    seeds = [3, 4, 5]            # non-empty, distinct, non-negative integers
    out = "runs/mild"            # output directory (the --out flag overrides it)
    baseline = "runs/hf-only"    # optional finished run to compare against

    [env]
    family = "point_mass"        # "point_mass" or "slip_chain"
    negated_reward = false       # low-fidelity reward multiplied by -1

    [env.high]                   # point_mass: friction, gravity; slip_chain: slip
    friction = 1.2
    [env.low]
    friction = 1.0

    [env.options]                # shared by both fidelities, e.g. horizon, dt,
    horizon = 50                 # process_noise, goal (point_mass) or
                                 # n_states, horizon, goal (slip_chain)

    [trainer]                    # any TrainerConfig field except the ones
    mode = "mfpg"                # set from [eval]; plus:
    reparameterization = true    # false turns mode "mfpg" into "mfpg-no-reparam"

    [eval]
    interval = 1000              # high-fidelity steps between evaluations
    episodes = 10

Unknown keys are rejected.  With ``negated_reward = true`` the value
baseline and the negative-correlation drop rule are switched off; setting
either of them to true explicitly is an error.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .envs import MultiFidelityPair, point_mass_pair, slip_chain_pair
from .trainer import TrainerConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """A configuration file that does not parse or validate; ``path`` names the field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


FAMILIES = {
    "point_mass": {"fidelity": ("friction", "gravity"),
                   "options": ("dt", "process_noise", "goal", "horizon", "gamma", "action_bound",
                               "position_bound", "velocity_bound", "init_spread")},
    "slip_chain": {"fidelity": ("slip",),
                   "options": ("n_states", "goal", "horizon", "gamma")},
}

_TRAINER_KEYS = tuple(f.name for f in fields(TrainerConfig)
                      if f.name not in ("eval_interval", "eval_episodes"))


@dataclass(frozen=True)
class EnvConfig:
    family: str = "point_mass"
    high: dict = field(default_factory=dict)
    low: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    negated_reward: bool = False

    def build(self) -> MultiFidelityPair:
        if self.family == "point_mass":
            kw = {f"high_{k}": v for k, v in self.high.items()}
            kw.update({f"low_{k}": v for k, v in self.low.items()})
            return point_mass_pair(negate_low_reward=self.negated_reward, **kw, **self.options)
        return slip_chain_pair(high_slip=self.high.get("slip", 0.2), low_slip=self.low.get("slip", 0.3),
                               negate_low_reward=self.negated_reward, **self.options)

    def to_dict(self) -> dict:
        return {"family": self.family, "negated_reward": self.negated_reward,
                "high": dict(self.high), "low": dict(self.low), "options": dict(self.options)}


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple
    env: EnvConfig = field(default_factory=EnvConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    name: str = ""
    out: str | None = None
    baseline: str | None = None

    def __post_init__(self):
        check_seeds(self.seeds, "experiment.seeds")

    def to_dict(self) -> dict:
        """Canonical content (output location excluded, since it does not change results)."""
        return {"name": self.name, "seeds": list(self.seeds), "env": self.env.to_dict(),
                "trainer": self.trainer.to_dict(), "baseline": self.baseline}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, seeds=tuple(seeds))


def check_seeds(seeds, path="seeds") -> tuple:
    seeds = tuple(seeds)
    if not seeds:
        raise ConfigError(path, "seed list must not be empty")
    for s in seeds:
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            raise ConfigError(path, f"seeds must be non-negative integers, got {s!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(path, "seeds must be distinct")
    return seeds


def parse_seed_list(text: str) -> tuple:
    """``"3,4,5"`` or a range ``"3-22"`` (inclusive), or a mix of both."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                seeds.extend(range(lo, hi + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError("--seeds", f"cannot parse seed list {text!r}") from None
    return check_seeds(seeds, "--seeds")


def _table(doc, key, path):
    value = doc.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(path, "expected a table")
    return value


def _no_unknown(table, allowed, path):
    extra = sorted(set(table) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}", f"unknown key; valid keys are {', '.join(sorted(allowed))}")


def _number(value, path, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if integer and not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    return value


def _env_config(doc) -> EnvConfig:
    env = _table(doc, "env", "env")
    _no_unknown(env, ("family", "negated_reward", "high", "low", "options"), "env")
    family = env.get("family", "point_mass")
    if family not in FAMILIES:
        raise ConfigError("env.family", f"must be one of {', '.join(FAMILIES)}, got {family!r}")
    spec = FAMILIES[family]
    parts = {}
    for side, allowed in (("high", spec["fidelity"]), ("low", spec["fidelity"]), ("options", spec["options"])):
        table = _table(env, side, f"env.{side}")
        _no_unknown(table, allowed, f"env.{side}")
        integer_keys = ("horizon", "n_states", "goal") if family == "slip_chain" else ("horizon",)
        parts[side] = {k: _number(v, f"env.{side}.{k}", integer=k in integer_keys) for k, v in table.items()}
    negated = env.get("negated_reward", False)
    if not isinstance(negated, bool):
        raise ConfigError("env.negated_reward", "expected true or false")
    cfg = EnvConfig(family, parts["high"], parts["low"], parts["options"], negated)
    try:
        cfg.build()
    except (TypeError, ValueError) as exc:
        raise ConfigError("env", str(exc)) from None
    return cfg


def _trainer_config(doc, negated: bool) -> TrainerConfig:
    table = dict(_table(doc, "trainer", "trainer"))
    _no_unknown(table, _TRAINER_KEYS + ("reparameterization",), "trainer")
    ev = _table(doc, "eval", "eval")
    _no_unknown(ev, ("interval", "episodes"), "eval")
    reparam = table.pop("reparameterization", True)
    if not isinstance(reparam, bool):
        raise ConfigError("trainer.reparameterization", "expected true or false")
    if negated:
        for key in ("use_baseline", "drop_negative_rho"):
            if table.get(key) is True:
                raise ConfigError(f"trainer.{key}", "must be false when env.negated_reward is true")
            table[key] = False
    if not reparam:
        if table.get("mode", "mfpg") not in ("mfpg", "mfpg-no-reparam"):
            raise ConfigError("trainer.reparameterization", "only applies to mode 'mfpg'")
        table["mode"] = "mfpg-no-reparam"
    for key, value in table.items():
        default = getattr(TrainerConfig, key, None)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"trainer.{key}", "expected true or false")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            _number(value, f"trainer.{key}", integer=isinstance(default, int))
    if "interval" in ev:
        table["eval_interval"] = _number(ev["interval"], "eval.interval", integer=True)
    if "episodes" in ev:
        table["eval_episodes"] = _number(ev["episodes"], "eval.episodes", integer=True)
    try:
        return TrainerConfig(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError("trainer", str(exc)) from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    _no_unknown(doc, ("experiment", "env", "trainer", "eval"), "")
    exp = _table(doc, "experiment", "experiment")
    _no_unknown(exp, ("name", "seeds", "out", "baseline"), "experiment")
    if "seeds" not in exp:
        raise ConfigError("experiment.seeds", "required")
    if not isinstance(exp["seeds"], list):
        raise ConfigError("experiment.seeds", "expected a list of integers")
    seeds = check_seeds(exp["seeds"], "experiment.seeds")
    for key in ("name", "out", "baseline"):
        if key in exp and not isinstance(exp[key], str):
            raise ConfigError(f"experiment.{key}", "expected a string")
    env = _env_config(doc)
    trainer = _trainer_config(doc, env.negated_reward)
    return ExperimentConfig(seeds, env, trainer, exp.get("name", ""), exp.get("out"), exp.get("baseline"))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"{path}: {exc}") from None
    return config_from_dict(doc)


def sweep_axes() -> tuple:
    """Dotted names accepted by ``sweep``."""
    axes = [f"trainer.{k}" for k in _TRAINER_KEYS] + ["trainer.reparameterization",
                                                       "eval.interval", "eval.episodes",
                                                       "env.negated_reward"]
    for fam in FAMILIES.values():
        for side in ("high", "low"):
            axes += [f"env.{side}.{k}" for k in fam["fidelity"]]
        axes += [f"env.options.{k}" for k in fam["options"]]
    return tuple(sorted(set(axes)))


def with_override(doc: dict, axis: str, value) -> dict:
    """Copy of a raw config document with the dotted key ``axis`` set to ``value``."""
    if axis not in sweep_axes():
        raise ConfigError(axis, f"unknown sweep axis; valid axes are {', '.join(sweep_axes())}")
    out = json.loads(json.dumps(doc))
    node = out
    *parents, leaf = axis.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value
    return out
