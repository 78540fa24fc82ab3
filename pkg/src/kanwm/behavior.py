"""Actor-critic learning on imagined latent rollouts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .backbones.spec import BackboneSpec, backbone_forward, frozen_names, init_backbone, param_count
from .core import tensor as T
from .core.tensor import DimensionError, Tensor
from .worldmodel import (
    RewardBins, RssmState, WorldModelConfig, cross_entropy, decode_reward, expected_value,
    gru_step, predict_continue, predict_prior, predict_reward, sample_latent, subparams,
    two_hot_encode, unimix_probs,
)

DEFAULT_GAMMA = 1.0 - 1.0 / 333.0
STD_MIN, STD_MAX = 0.1, 1.0


@dataclass(frozen=True)
class BehaviorConfig:
    actor: BackboneSpec
    critic: BackboneSpec
    action_dim: int = 2
    discrete: bool = False
    horizon: int = 15
    gamma: float = DEFAULT_GAMMA
    lam: float = 0.95
    entropy: float = 3e-4
    unimix: float = 0.01
    critic_ema_decay: float = 0.98
    critic_ema_reg: float = 1.0
    critic_replay_scale: float = 0.3
    bins: RewardBins = field(default_factory=RewardBins)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("imagination horizon must be >= 1")
        want = self.action_dim if self.discrete else 2 * self.action_dim
        if self.actor.out_dim != want:
            raise DimensionError(f"actor must emit {want} outputs, got {self.actor.out_dim}")
        if self.critic.out_dim != self.bins.count:
            raise DimensionError("critic must emit one logit per reward bin")


def make_behavior_config(kind: str = "mlp", feat_dim: int = 192, *, action_dim: int = 2,
                         discrete: bool = False, actor_units: int = 64, critic_units: int | None = None,
                         hidden_layers: int = 1, bins: RewardBins | None = None,
                         **kw) -> BehaviorConfig:
    bins = bins or RewardBins()
    critic_units = actor_units if critic_units is None else critic_units
    out = action_dim if discrete else 2 * action_dim
    actor = BackboneSpec(kind, in_dim=feat_dim, out_dim=out, units=actor_units, num_hidden_layers=hidden_layers)
    critic = BackboneSpec(kind, in_dim=feat_dim, out_dim=bins.count, units=critic_units,
                          num_hidden_layers=hidden_layers, zero_output=True)
    return BehaviorConfig(actor=actor, critic=critic, action_dim=action_dim, discrete=discrete, bins=bins, **kw)


def init_behavior(cfg: BehaviorConfig, seed) -> dict[str, np.ndarray]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {"actor/" + k: v for k, v in init_backbone(cfg.actor, rng).items()}
    params.update({"critic/" + k: v for k, v in init_backbone(cfg.critic, rng).items()})
    return params


def behavior_frozen(cfg: BehaviorConfig) -> set[str]:
    return frozen_names(cfg.actor, "actor/") | frozen_names(cfg.critic, "critic/")


def behavior_param_count(cfg: BehaviorConfig) -> int:
    return param_count(cfg.actor) + param_count(cfg.critic)


def critic_params(params: Mapping) -> dict:
    return {k: np.array(getattr(v, "data", v), copy=True) for k, v in params.items() if k.startswith("critic/")}


# ---------------------------------------------------------------------------
# policy head

def _policy_out(feat, params: Mapping, cfg: BehaviorConfig) -> Tensor:
    return backbone_forward(cfg.actor, subparams(params, "actor/"), feat)


def gaussian_params(out: Tensor, action_dim: int) -> tuple[Tensor, Tensor]:
    mean = T.getitem(out, (slice(None), slice(0, action_dim)))
    raw = T.getitem(out, (slice(None), slice(action_dim, 2 * action_dim)))
    std = T.add(T.scale(T.sigmoid(raw), STD_MAX - STD_MIN), STD_MIN)
    return mean, std


def tanh_log_det(u: np.ndarray) -> np.ndarray:
    """``log(1 - tanh(u)^2)`` in a form that stays finite for large ``|u|``."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def gaussian_log_prob(u: np.ndarray, mean: Tensor, std: Tensor) -> Tensor:
    """Per-row log density of the pre-squash sample ``u`` under N(mean, std)."""
    z = T.div(T.sub(u, mean), std)
    per_dim = T.sub(T.scale(T.square(z), -0.5), T.log(std))
    return T.add(T.sum_(per_dim, axis=-1), -0.5 * math.log(2 * math.pi) * u.shape[-1])


def gaussian_entropy(std: Tensor) -> Tensor:
    return T.add(T.sum_(T.log(std), axis=-1), 0.5 * math.log(2 * math.pi * math.e) * std.shape[-1])


def categorical_entropy(probs: Tensor) -> Tensor:
    return T.scale(T.sum_(T.mul(probs, T.log(probs)), axis=-1), -1.0)


def sample_action(feat, params: Mapping, cfg: BehaviorConfig, rng: np.random.Generator,
                  greedy: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(action, raw)``; ``raw`` is the pre-tanh sample or the class index."""
    with T.no_grad():
        out = _policy_out(feat, params, cfg)
        if cfg.discrete:
            probs = unimix_probs(out, cfg.unimix).data
            if greedy:
                idx = probs.argmax(axis=-1)
            else:
                cdf = np.cumsum(probs, axis=-1)
                idx = np.minimum((rng.random((probs.shape[0], 1)) > cdf).sum(-1), probs.shape[-1] - 1)
            return np.eye(cfg.action_dim)[idx], idx.astype(np.float64)
        mean, std = gaussian_params(out, cfg.action_dim)
        u = mean.data if greedy else mean.data + std.data * rng.standard_normal(mean.shape)
        return np.tanh(u), u


def policy_terms(feat, raw: np.ndarray, params: Mapping, cfg: BehaviorConfig) -> tuple[Tensor, Tensor]:
    """Log-probability of the stored actions and policy entropy, per row."""
    out = _policy_out(feat, params, cfg)
    if cfg.discrete:
        probs = unimix_probs(out, cfg.unimix)
        onehot = np.eye(cfg.action_dim)[raw.astype(int)]
        logp = T.sum_(T.mul(T.log(probs), onehot), axis=-1)
        return logp, categorical_entropy(probs)
    mean, std = gaussian_params(out, cfg.action_dim)
    logp = T.sub(gaussian_log_prob(raw, mean, std), tanh_log_det(raw).sum(axis=-1))
    return logp, gaussian_entropy(std)


# ---------------------------------------------------------------------------
# imagination

@dataclass
class ImaginedTrajectory:
    """Arrays are time-major: ``feats`` [H+1, N, F], ``actions``/``raw`` [H, N, ...],
    ``rewards``/``continues`` [H, N], ``values`` [H+1, N], ``weights`` [H+1, N]."""

    feats: np.ndarray
    actions: np.ndarray
    raw: np.ndarray
    rewards: np.ndarray
    continues: np.ndarray
    values: np.ndarray
    weights: np.ndarray

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0]


def critic_logits(feat, params: Mapping, cfg: BehaviorConfig) -> Tensor:
    return backbone_forward(cfg.critic, subparams(params, "critic/"), feat)


def critic_value(feat, params: Mapping, cfg: BehaviorConfig) -> np.ndarray:
    with T.no_grad():
        return expected_value(critic_logits(feat, params, cfg), cfg.bins)


def discount_weights(continues: np.ndarray, gamma: float) -> np.ndarray:
    """``w_0 = 1``, ``w_t = prod_{i<t} gamma * c_i``; shape [H+1, ...]."""
    c = np.asarray(continues, dtype=np.float64)
    w = np.ones((c.shape[0] + 1,) + c.shape[1:])
    w[1:] = np.cumprod(gamma * c, axis=0)
    return w


def imagine_rollout(start: RssmState, horizon: int, wm_params: Mapping, wm_cfg: WorldModelConfig,
                    params: Mapping, cfg: BehaviorConfig, rng: np.random.Generator,
                    unimix: float = 0.01) -> ImaginedTrajectory:
    """Roll the prior forward ``horizon`` steps from posterior ``start`` states.

    Runs without a tape, so world-model parameters receive no gradient.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    h = np.asarray(getattr(start.h, "data", start.h), dtype=T.default_dtype())
    z = np.asarray(getattr(start.z, "data", start.z), dtype=T.default_dtype())
    h = h.reshape(-1, h.shape[-1])
    z = z.reshape(-1, z.shape[-1])
    feats, actions, raws, rewards, conts = [np.concatenate([h, z], -1)], [], [], [], []
    with T.no_grad():
        for _ in range(horizon):
            a, raw = sample_action(feats[-1], params, cfg, rng)
            h = gru_step(h, z, a, wm_params).data
            probs = unimix_probs(predict_prior(h, wm_params, wm_cfg), unimix)
            z = sample_latent(probs, rng).data
            feat = np.concatenate([h, z], -1)
            rewards.append(decode_reward(predict_reward(feat, wm_params, wm_cfg), wm_cfg))
            conts.append(T.sigmoid(predict_continue(feat, wm_params, wm_cfg)).data[:, 0])
            feats.append(feat)
            actions.append(a)
            raws.append(raw)
    feats_arr = np.stack(feats)
    n = feats_arr.shape[1]
    values = critic_value(feats_arr.reshape(-1, feats_arr.shape[-1]), params, cfg).reshape(horizon + 1, n)
    conts_arr = np.stack(conts)
    return ImaginedTrajectory(feats_arr, np.stack(actions), np.stack(raws), np.stack(rewards),
                              conts_arr, values, discount_weights(conts_arr, cfg.gamma))


# ---------------------------------------------------------------------------
# returns and normalization

def lambda_returns(rewards, values, continues, lam: float = 0.95, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Backward recursion ``R_t = r_{t+1} + gamma c_{t+1} ((1 - lam) v_{t+1} + lam R_{t+1})``, ``R_H = v_H``.

    ``rewards[t]`` and ``continues[t]`` belong to step t+1; returns R_0..R_{H-1}.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    c = np.asarray(continues, dtype=np.float64)
    if r.shape != c.shape or v.shape[0] != r.shape[0] + 1 or v.shape[1:] != r.shape[1:]:
        raise ValueError(f"length mismatch: rewards {r.shape}, values {v.shape}, continues {c.shape}")
    out = np.empty_like(r)
    nxt = v[-1]
    for t in range(r.shape[0] - 1, -1, -1):
        nxt = r[t] + gamma * c[t] * ((1.0 - lam) * v[t + 1] + lam * nxt)
        out[t] = nxt
    return out


@dataclass(frozen=True)
class ReturnNormalizer:
    scale: float = 0.0
    decay: float = 0.99
    limit: float = 1.0
    low: float = 5.0
    high: float = 95.0

    @property
    def divisor(self) -> float:
        return max(self.limit, self.scale)


def update_return_normalizer(norm: ReturnNormalizer, returns) -> tuple[ReturnNormalizer, float]:
    r = np.asarray(returns, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ValueError("cannot normalize an empty return batch")
    lo, hi = np.percentile(r, [norm.low, norm.high])
    batch_scale = float(hi - lo)
    new = replace(norm, scale=norm.decay * norm.scale + (1.0 - norm.decay) * batch_scale)
    return new, new.divisor


# ---------------------------------------------------------------------------
# losses

def actor_loss(traj: ImaginedTrajectory, returns, values, divisor: float, params: Mapping,
               cfg: BehaviorConfig) -> Tensor:
    """Score-function loss ``-mean(w (log pi(a|s) adv + eta H[pi]))`` with frozen advantages."""
    h = traj.horizon
    n = traj.feats.shape[1]
    adv = (np.asarray(returns) - np.asarray(values)[:h]) / divisor
    feat = traj.feats[:h].reshape(h * n, -1)
    raw = traj.raw.reshape((h * n,) + traj.raw.shape[2:])
    logp, ent = policy_terms(feat, raw, params, cfg)
    w = traj.weights[:h].reshape(-1)
    obj = T.add(T.mul(logp, adv.reshape(-1)), T.scale(ent, cfg.entropy))
    return T.scale(T.mean(T.mul(obj, w)), -1.0)


def critic_loss(traj: ImaginedTrajectory, returns, params: Mapping, ema: Mapping,
                cfg: BehaviorConfig, replay_feats=None, replay_returns=None) -> Tensor:
    """Two-hot CE to lambda-returns, CE to the EMA critic, plus the replay term.

    The replay term defaults to the rollout start states (the posterior states
    of the replay batch) paired with their lambda-returns.
    """
    if ema is None or not any(k.startswith("critic/") for k in ema):
        raise KeyError("critic loss needs the EMA critic parameters")
    h = traj.horizon
    n = traj.feats.shape[1]
    ret = np.asarray(returns, dtype=np.float64)
    feat = traj.feats[:h].reshape(h * n, -1)
    logits = critic_logits(feat, params, cfg)
    target = cross_entropy(logits, two_hot_encode(ret.reshape(-1), cfg.bins))
    with T.no_grad():
        ema_probs = T.softmax(critic_logits(feat, ema, cfg)).data
    reg = cross_entropy(logits, ema_probs)
    w = traj.weights[:h].reshape(-1)
    imagined = T.mean(T.mul(T.add(target, T.scale(reg, cfg.critic_ema_reg)), w))
    if replay_feats is None:
        replay_feats, replay_returns = traj.feats[0], ret[0]
    rep_logits = critic_logits(replay_feats, params, cfg)
    replay = T.mean(cross_entropy(rep_logits, two_hot_encode(np.asarray(replay_returns).reshape(-1), cfg.bins)))
    return T.add(imagined, T.scale(replay, cfg.critic_replay_scale))


def ema_update(ema: Mapping[str, np.ndarray], params: Mapping, decay: float) -> dict[str, np.ndarray]:
    """``ema <- decay * ema + (1 - decay) * params`` for every key of ``ema``; returns a new dict."""
    return {k: decay * v + (1.0 - decay) * np.asarray(getattr(params[k], "data", params[k]))
            for k, v in ema.items()}
