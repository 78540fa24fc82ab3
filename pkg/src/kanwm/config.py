"""Experiment configuration: one flat YAML mapping, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

PERCEPTION_KINDS = ("cnn", "mlp", "kan", "fastkan")
VECTOR_KINDS = ("mlp", "kan", "fastkan")
BASELINE = {"perception": "cnn", "prediction": "mlp", "behavior": "mlp"}
SUBSYSTEMS = tuple(BASELINE)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # backbone per subsystem
    perception: str = "cnn"
    prediction: str = "mlp"
    behavior: str = "mlp"
    hidden_layers: int = 1
    # iso-parameter sizing; perception_budget None means "match the CNN baseline"
    param_budget: int = 100_000
    tolerance: float = 0.01
    perception_budget: int | None = None
    perception_tolerance: float = 0.1
    cnn_depth: int = 16
    # run
    seed: int = 0
    env_steps: int = 50_000
    train_ratio: float = 1.0 / 16.0
    batch_size: int = 16
    batch_length: int = 64
    replay_capacity: int = 100_000
    log_every: int = 200
    eval_every: int = 2_500
    eval_episodes: int = 5
    final_eval_episodes: int = 10
    precision: str = "float32"
    # world model
    h_dim: int = 128
    latent_groups: int = 8
    latent_classes: int = 8
    reward_bins: int = 41
    bin_limit: float = 10.0
    loss_pred: float = 1.0
    loss_dyn: float = 1.0
    loss_rep: float = 0.1
    free_nats: float = 1.0
    latent_unimix: float = 0.01
    # behavior
    horizon: int = 15
    imag_starts: int = 256
    discount_horizon: float = 333.0
    return_lambda: float = 0.95
    actor_entropy: float = 3e-4
    actor_unimix: float = 0.01
    retnorm_decay: float = 0.99
    retnorm_limit: float = 1.0
    retnorm_low: float = 5.0
    retnorm_high: float = 95.0
    critic_ema_decay: float = 0.98
    critic_ema_reg: float = 1.0
    critic_replay_scale: float = 0.3
    # optimizer, shared by every module
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-20
    agc: float = 0.3

    def __post_init__(self):
        if self.perception not in PERCEPTION_KINDS:
            raise ConfigError(f"perception must be one of {PERCEPTION_KINDS}")
        for name in ("prediction", "behavior"):
            if getattr(self, name) not in VECTOR_KINDS:
                raise ConfigError(f"{name} must be one of {VECTOR_KINDS}")
        if self.tolerance <= 0 or self.perception_tolerance <= 0:
            raise ConfigError("tolerance must be > 0")
        if self.train_ratio <= 0:
            raise ConfigError("train_ratio must be > 0")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision must be float64 or float32")
        for name in ("env_steps", "batch_size", "batch_length", "replay_capacity", "log_every",
                     "eval_every", "horizon", "h_dim", "latent_groups", "latent_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.imag_starts < 0:
            raise ConfigError("imag_starts must be >= 0 (0 uses every posterior state)")
        if self.reward_bins < 3 or self.reward_bins % 2 == 0:
            raise ConfigError("reward_bins must be odd and >= 3")

    @property
    def gamma(self) -> float:
        return 1.0 - 1.0 / self.discount_horizon

    @property
    def group(self) -> str:
        changed = [s for s in SUBSYSTEMS if getattr(self, s) != BASELINE[s]]
        if len(changed) > 1:
            return "mixed"
        return changed[0] if changed else "baseline"

    @property
    def backbone(self) -> str:
        g = self.group
        if g == "baseline":
            return "baseline"
        if g == "mixed":
            return "-".join(getattr(self, s) for s in SUBSYSTEMS)
        return getattr(self, g)

    @property
    def run_id(self) -> str:
        g = self.group
        name = g if g in ("baseline",) else f"{g}-{self.backbone}"
        return f"{name}-s{self.seed}"

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**data)


def load_config(path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text())
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def smoke_config(**kw) -> ExperimentConfig:
    """A 2k-step run sized to finish in a couple of minutes on one core."""
    base = dict(env_steps=2_000, batch_size=8, batch_length=32, imag_starts=64, log_every=200,
                eval_every=1_000, eval_episodes=2, final_eval_episodes=2, replay_capacity=5_000)
    base.update(kw)
    return ExperimentConfig(**base)
