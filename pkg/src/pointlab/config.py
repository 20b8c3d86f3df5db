"""Declarative run configuration.

One YAML file (plus CLI overrides) pins everything a run needs: study,
priors, design space, POMDP constants, per-phase PPO hyperparameters,
seeds and the profile. The "paper" profile uses the full training
budgets; "desk" is the 1/10-scale profile used by the acceptance suite.
Unknown keys are rejected by name so typos cannot silently change a run.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace

import yaml

from .ppo import PpoConfig
from .user_model import StudyConfig, for_study

PROFILES = ("paper", "desk")


class ConfigError(ValueError):
    """Bad or unknown configuration content; maps to exit code 2."""


USER_PPO_DEFAULTS: dict[str, dict] = {
    "paper": dict(
        lr=2e-4, gamma=0.99, clip_range=0.18, ent_coef=0.001, max_grad_norm=0.55,
        epochs=6, minibatch_size=256, n_steps=128, n_envs=32, total_steps=3_000_000,
    ),
    "desk": dict(
        lr=3e-4, lr_end=1e-4, gamma=0.99, clip_range=0.18, ent_coef=0.001,
        max_grad_norm=0.55, epochs=6, minibatch_size=256, n_steps=128, n_envs=32,
        total_steps=300_000,
    ),
}

ANALYST_PPO_DEFAULTS: dict[str, dict] = {
    "paper": dict(
        lr=5e-5, lr_end=1e-5, gamma=0.99, clip_range=0.10, ent_coef=0.01,
        max_grad_norm=0.55, epochs=6, minibatch_size=256, n_steps=130, n_envs=32,
        total_steps=4_000_000, use_ema_rewards=True,
    ),
    "desk": dict(
        lr=3e-4, lr_end=5e-5, gamma=0.99, clip_range=0.10, ent_coef=0.01,
        max_grad_norm=0.55, epochs=6, minibatch_size=256, n_steps=130, n_envs=32,
        total_steps=400_000, use_ema_rewards=True,
    ),
}

EVAL_EPISODES = {"paper": 1000, "desk": 1000}

STUDY_OVERRIDE_KEYS = {
    "prior",
    "fixed",
    "max_steps",
    "termination_penalty",
    "detect_kappa",
    "design_distance",
    "design_width",
    "n_experiments",
}


@dataclass
class RunConfig:
    """Everything one pipeline run needs, serialisable to YAML."""

    study: int = 1
    profile: str = "desk"
    seed: int = 0
    workers: int = max(1, (os.cpu_count() or 2) - 1)
    perceptual_noise: float = 0.05  # study-1 condition level
    obs_noise: float = 0.0  # analyst outcome corruption knob
    random_designs: bool = False
    mask_outcomes: bool = False
    eval_episodes: int | None = None
    behaviour_episodes: int = 1000
    study_overrides: dict = field(default_factory=dict)
    user_ppo: dict = field(default_factory=dict)
    analyst_ppo: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.study not in (1, 2, 3):
            raise ConfigError(f"study must be 1, 2 or 3, got {self.study}")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        unknown = set(self.study_overrides) - STUDY_OVERRIDE_KEYS
        if unknown:
            raise ConfigError(f"unknown study_overrides keys: {sorted(unknown)}")
        for name, overrides in (("user_ppo", self.user_ppo), ("analyst_ppo", self.analyst_ppo)):
            bad = set(overrides) - set(PpoConfig.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown {name} keys: {sorted(bad)}")

    # -- builders ----------------------------------------------------------

    def study_config(self) -> StudyConfig:
        overrides = dict(self.study_overrides)
        if self.study == 1:
            return for_study(1, perceptual_noise=self.perceptual_noise, **overrides)
        return for_study(self.study, **overrides)

    def user_ppo_config(self) -> PpoConfig:
        return PpoConfig(**{**USER_PPO_DEFAULTS[self.profile], **self.user_ppo})

    def analyst_ppo_config(self) -> PpoConfig:
        return PpoConfig(**{**ANALYST_PPO_DEFAULTS[self.profile], **self.analyst_ppo})

    def n_eval_episodes(self) -> int:
        return self.eval_episodes if self.eval_episodes is not None else EVAL_EPISODES[self.profile]

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_cli_overrides(self, **kw) -> "RunConfig":
        updates = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **updates) if updates else self


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
