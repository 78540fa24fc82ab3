"""Iso-parameter sizing: pick widths so every variant of a subsystem has the same budget."""

from __future__ import annotations

from dataclasses import dataclass

from .backbones.spec import BackboneSpec, param_count
from .behavior import BehaviorConfig, make_behavior_config
from .config import ExperimentConfig
from .worldmodel import RewardBins, WorldModelConfig, make_world_model_config

MAX_UNITS = 4096


class InfeasibleBudget(ValueError):
    pass


@dataclass(frozen=True)
class SizingContext:
    obs_shape: tuple = (16, 16, 3)
    action_dim: int = 2
    h_dim: int = 128
    groups: int = 8
    classes: int = 8
    bins: int = 41
    bin_limit: float = 10.0
    hidden_layers: int = 1

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "SizingContext":
        return cls(h_dim=cfg.h_dim, groups=cfg.latent_groups, classes=cfg.latent_classes,
                   bins=cfg.reward_bins, bin_limit=cfg.bin_limit, hidden_layers=cfg.hidden_layers)

    @property
    def reward_bins(self) -> RewardBins:
        return RewardBins(self.bins, -self.bin_limit, self.bin_limit)

    @property
    def feat_dim(self) -> int:
        return self.h_dim + self.groups * self.classes


def _wm(ctx: SizingContext, perception: str, prediction: str, enc=8, dec=8, rew=64, con=64,
        prior=128) -> WorldModelConfig:
    return make_world_model_config(
        perception, prediction, obs_shape=ctx.obs_shape, action_dim=ctx.action_dim, h_dim=ctx.h_dim,
        groups=ctx.groups, classes=ctx.classes, bins=ctx.reward_bins, encoder_units=enc,
        decoder_units=dec, reward_units=rew, cont_units=con, prior_units=prior,
        hidden_layers=ctx.hidden_layers)


def subsystem_specs(subsystem: str, kind: str, units: tuple[int, int],
                    ctx: SizingContext) -> tuple[BackboneSpec, BackboneSpec]:
    """The two networks a subsystem swaps: (encoder, decoder), (reward, continue) or (actor, critic)."""
    u1, u2 = units
    if subsystem == "perception":
        wm = _wm(ctx, kind, "mlp", enc=u1, dec=u2)
        return wm.encoder, wm.decoder
    if subsystem == "prediction":
        wm = _wm(ctx, "cnn", kind, rew=u1, con=u2)
        return wm.reward, wm.cont
    if subsystem == "behavior":
        bc = make_behavior_config(kind, ctx.feat_dim, action_dim=ctx.action_dim, actor_units=u1,
                                  critic_units=u2, hidden_layers=ctx.hidden_layers, bins=ctx.reward_bins)
        return bc.actor, bc.critic
    raise ValueError(f"unknown subsystem {subsystem!r}")


def subsystem_param_count(subsystem: str, kind: str, units: tuple[int, int], ctx: SizingContext) -> int:
    a, b = subsystem_specs(subsystem, kind, units, ctx)
    return param_count(a) + param_count(b)


def iso_param_solve(subsystem: str, kind: str, target: int, tolerance: float,
                    ctx: SizingContext | None = None) -> tuple[int, int]:
    """Widths (one per network) whose trainable count is closest to ``target``.

    Scans the second width and binary-searches the first.  Among pairs within a
    quarter of the tolerance the most balanced one wins, otherwise the closest.
    Raises ``InfeasibleBudget`` when even one unit each is too large or the
    best relative error exceeds ``tolerance``.
    """
    ctx = ctx or SizingContext()
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")

    def count(u1, u2):
        return subsystem_param_count(subsystem, kind, (u1, u2), ctx)

    floor = count(1, 1)
    if floor > target * (1 + tolerance):
        raise InfeasibleBudget(f"{subsystem}/{kind}: smallest model has {floor} params > target {target}")
    best = None
    for u2 in range(1, MAX_UNITS + 1):
        if count(1, u2) > target * (1 + tolerance) and best is not None:
            break
        lo, hi = 1, MAX_UNITS
        while lo < hi:
            mid = (lo + hi) // 2
            if count(mid, u2) < target:
                lo = mid + 1
            else:
                hi = mid
        for u1 in {max(1, lo - 1), lo}:
            err = abs(count(u1, u2) - target)
            slack = tolerance * target / 4
            key = (0 if err <= slack else err, abs(u1 - u2), err)
            if best is None or key < best[0]:
                best = (key, (u1, u2))
    err = best[0][2] / target
    if err > tolerance:
        raise InfeasibleBudget(f"{subsystem}/{kind}: best relative error {err:.4f} exceeds {tolerance}")
    return best[1]


@dataclass(frozen=True)
class ModelSizing:
    perception: tuple[int, int]
    prediction: tuple[int, int]
    behavior: tuple[int, int]
    counts: dict

    def to_dict(self) -> dict:
        return {"perception": list(self.perception), "prediction": list(self.prediction),
                "behavior": list(self.behavior), "counts": dict(self.counts)}


def size_models(cfg: ExperimentConfig) -> tuple[WorldModelConfig, BehaviorConfig, ModelSizing]:
    """Solve widths for every subsystem of ``cfg`` and assemble the model configs."""
    ctx = SizingContext.from_config(cfg)
    depth = (cfg.cnn_depth, cfg.cnn_depth)
    p_target = cfg.perception_budget or subsystem_param_count("perception", "cnn", depth, ctx)
    if cfg.perception == "cnn" and cfg.perception_budget is None:
        perc = depth
    else:
        perc = iso_param_solve("perception", cfg.perception, p_target, cfg.perception_tolerance, ctx)
    pred = iso_param_solve("prediction", cfg.prediction, cfg.param_budget, cfg.tolerance, ctx)
    beh = iso_param_solve("behavior", cfg.behavior, cfg.param_budget, cfg.tolerance, ctx)
    wm = make_world_model_config(
        cfg.perception, cfg.prediction, obs_shape=ctx.obs_shape, action_dim=ctx.action_dim,
        h_dim=cfg.h_dim, groups=cfg.latent_groups, classes=cfg.latent_classes, bins=ctx.reward_bins,
        encoder_units=perc[0], decoder_units=perc[1], reward_units=pred[0], cont_units=pred[1],
        prior_units=cfg.h_dim, hidden_layers=cfg.hidden_layers)
    bc = make_behavior_config(
        cfg.behavior, wm.feat_dim, action_dim=ctx.action_dim, actor_units=beh[0], critic_units=beh[1],
        hidden_layers=cfg.hidden_layers, bins=ctx.reward_bins, horizon=cfg.horizon, gamma=cfg.gamma,
        lam=cfg.return_lambda, entropy=cfg.actor_entropy, unimix=cfg.actor_unimix,
        critic_ema_decay=cfg.critic_ema_decay, critic_ema_reg=cfg.critic_ema_reg,
        critic_replay_scale=cfg.critic_replay_scale)
    counts = {
        "perception": subsystem_param_count("perception", cfg.perception, perc, ctx),
        "prediction": subsystem_param_count("prediction", cfg.prediction, pred, ctx),
        "behavior": subsystem_param_count("behavior", cfg.behavior, beh, ctx),
        "perception_target": int(p_target),
    }
    return wm, bc, ModelSizing(perc, pred, beh, counts)
