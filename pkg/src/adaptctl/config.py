"""Strict JSON run configuration for the command-line pipeline.

One file describes every stage for one system family: data collection,
basis training, bank construction, policy training, and closed-loop
evaluation. Parsing is strict on purpose: unknown keys are rejected with
the list of valid ones, so a typo in a config fails loudly instead of
silently falling back to a default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .dynamics import get_system


class ConfigError(ValueError):
    pass


@dataclass
class CollectConfig:
    n_systems: int = 20
    transitions: int = 500
    hold_steps: int = 5
    excitation: str = "piecewise"

    def validate(self):
        _positive(self, "n_systems", "transitions", "hold_steps")
        if self.excitation not in ("piecewise", "random"):
            raise ConfigError(f"excitation must be 'piecewise' or 'random', got {self.excitation!r}")


@dataclass
class BasisConfig:
    size: int = 8
    hidden: list = field(default_factory=lambda: [64, 64, 64])
    lam: float = 1e-3

    def validate(self):
        _positive(self, "size")
        _layer_list(self.hidden, "basis.hidden")
        if self.lam <= 0:
            raise ConfigError("basis.lam must be positive")


@dataclass
class FeTrainSection:
    lr: float = 1e-3
    epochs: int = 300
    support: int = 100
    batch: int = 128
    target_loss: float | None = None

    def validate(self):
        _positive(self, "epochs", "support", "batch")
        if self.lr <= 0:
            raise ConfigError("fe_train.lr must be positive")


@dataclass
class PolicyConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    iters: int = 1500
    batch: int = 64
    lr: float = 1e-3
    mixture: float = 0.25
    coeff_noise: float = 0.0

    def validate(self):
        _positive(self, "iters", "batch")
        _layer_list(self.hidden, "policy.hidden")
        if self.lr <= 0:
            raise ConfigError("policy.lr must be positive")
        if not 0.0 <= self.mixture <= 1.0:
            raise ConfigError("policy.mixture must lie in [0, 1]")
        if self.coeff_noise < 0:
            raise ConfigError("policy.coeff_noise must be nonnegative")


@dataclass
class ProblemSection:
    horizon: int | None = None
    penalty_weight: float | None = None

    def validate(self):
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("problem.horizon must be positive")
        if self.penalty_weight is not None and self.penalty_weight < 0:
            raise ConfigError("problem.penalty_weight must be nonnegative")


@dataclass
class EpisodeConfig:
    episodes: int = 20
    steps: int = 100
    window: int = 100
    period: int = 25
    warmup: int | None = None
    refit_trigger: float = 0.0
    xi_hold: int | None = None
    switch_lo: int | None = None
    switch_hi: int | None = None

    def validate(self):
        _positive(self, "episodes", "steps", "window", "period")
        if self.warmup is not None and self.warmup < 1:
            raise ConfigError("episode.warmup must be positive")
        if self.refit_trigger < 0:
            raise ConfigError("episode.refit_trigger must be nonnegative")
        if self.xi_hold is not None and self.xi_hold < 1:
            raise ConfigError("episode.xi_hold must be positive")
        has_lo, has_hi = self.switch_lo is not None, self.switch_hi is not None
        if has_lo != has_hi:
            raise ConfigError("switch_lo and switch_hi must be given together")
        if has_lo and not 0 < self.switch_lo <= self.switch_hi:
            raise ConfigError("switch window must satisfy 0 < switch_lo <= switch_hi")


_SECTIONS = {
    "collect": CollectConfig,
    "basis": BasisConfig,
    "fe_train": FeTrainSection,
    "policy": PolicyConfig,
    "problem": ProblemSection,
    "episode": EpisodeConfig,
}


@dataclass
class RunConfig:
    system: str
    seed: int = 0
    collect: CollectConfig = field(default_factory=CollectConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    fe_train: FeTrainSection = field(default_factory=FeTrainSection)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    problem: ProblemSection = field(default_factory=ProblemSection)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)

    def validate(self):
        get_system(self.system)
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        for name in _SECTIONS:
            getattr(self, name).validate()
        return self


def _positive(obj, *names):
    for name in names:
        if getattr(obj, name) < 1:
            raise ConfigError(f"{type(obj).__name__}.{name} must be a positive integer")


def _layer_list(layers, where):
    if not isinstance(layers, list) or not all(
            isinstance(w, int) and w > 0 for w in layers):
        raise ConfigError(f"{where} must be a list of positive layer widths")


def _strict(cls, doc: dict, where: str):
    valid = {f.name for f in fields(cls)}
    unknown = set(doc) - valid
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in {where}; valid keys: {sorted(valid)}")
    return cls(**doc)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    if "system" not in doc:
        raise ConfigError("config needs a 'system' key")
    top_valid = {"system", "seed", *_SECTIONS}
    unknown = set(doc) - top_valid
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} at top level; valid keys: {sorted(top_valid)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = doc.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"section '{name}' must be an object")
        sections[name] = _strict(cls, raw, f"section '{name}'")
    cfg = RunConfig(system=doc["system"], seed=int(doc.get("seed", 0)), **sections)
    return cfg.validate()


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")


def default_config(system: str) -> RunConfig:
    """Reproduction-scale settings for each system family."""
    base = {
        "van_der_pol": RunConfig(
            system=system,
            collect=CollectConfig(n_systems=20, transitions=500),
            basis=BasisConfig(size=11, hidden=[64, 64, 64]),
            fe_train=FeTrainSection(epochs=300),
            policy=PolicyConfig(hidden=[64, 64], iters=2500),
            episode=EpisodeConfig(episodes=50, steps=100, window=100, period=25),
        ),
        "two_tank": RunConfig(
            system=system,
            collect=CollectConfig(n_systems=20, transitions=500),
            basis=BasisConfig(size=12, hidden=[64, 64, 64]),
            fe_train=FeTrainSection(epochs=300),
            policy=PolicyConfig(hidden=[64, 64], iters=2500),
            episode=EpisodeConfig(episodes=20, steps=300, window=100, period=25,
                                  xi_hold=100),
        ),
        "glycolytic": RunConfig(
            system=system,
            collect=CollectConfig(n_systems=18, transitions=600),
            basis=BasisConfig(size=32, hidden=[96, 96, 96]),
            fe_train=FeTrainSection(epochs=400, support=150),
            policy=PolicyConfig(hidden=[64, 64], iters=2000),
            episode=EpisodeConfig(episodes=20, steps=200, window=100, period=25),
        ),
        "quadrotor": RunConfig(
            system=system,
            collect=CollectConfig(n_systems=20, transitions=600),
            basis=BasisConfig(size=24, hidden=[96, 96, 96]),
            fe_train=FeTrainSection(epochs=400, support=150),
            policy=PolicyConfig(hidden=[64, 64], iters=2000),
            episode=EpisodeConfig(episodes=20, steps=500, window=100, period=25,
                                  switch_lo=100, switch_hi=1000),
        ),
        "synthetic_linear": RunConfig(
            system=system,
            collect=CollectConfig(n_systems=8, transitions=100),
            basis=BasisConfig(size=6, hidden=[16, 16]),
            fe_train=FeTrainSection(epochs=200, support=40, batch=40),
            policy=PolicyConfig(hidden=[16], iters=500),
            episode=EpisodeConfig(episodes=10, steps=50, window=50, period=10),
        ),
    }
    try:
        return base[system].validate()
    except KeyError:
        raise ConfigError(f"no default config for system '{system}'") from None


def summarize(cfg: RunConfig) -> str:
    """One-line description used by the CLI when a stage starts."""
    return (f"{cfg.system}: B={cfg.basis.size} datasets={cfg.collect.n_systems}"
            f"x{cfg.collect.transitions} fe_epochs={cfg.fe_train.epochs}"
            f" policy_iters={cfg.policy.iters} episodes={cfg.episode.episodes}")
