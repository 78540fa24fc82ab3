"""Recurrent state-space world model with categorical latents and pluggable heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .backbones.spec import (
    BackboneSpec, backbone_forward, frozen_names, init_backbone, param_count,
)
from .core import tensor as T
from .core.tensor import DimensionError, Tensor


# ---------------------------------------------------------------------------
# small helpers shared with the behavior module

def subparams(params: Mapping, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    return np.sign(x) * np.expm1(np.abs(x))


@dataclass(frozen=True)
class RewardBins:
    """Bin centers, evenly spaced in symlog space and symmetric around zero."""

    count: int = 41
    low: float = -10.0
    high: float = 10.0

    def __post_init__(self):
        if self.count < 3 or self.count % 2 == 0:
            raise ValueError("bin count must be odd and >= 3")
        if self.low != -self.high:
            raise ValueError("bins must be symmetric around zero")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.count)


def two_hot_encode(v, bins: RewardBins) -> np.ndarray:
    """Weights on the two centers bracketing ``symlog(v)``; shape ``v.shape + (count,)``."""
    v = np.asarray(v, dtype=np.float64)
    c = bins.centers
    y = np.clip(symlog(v), c[0], c[-1])
    hi = np.clip(np.searchsorted(c, y, side="right"), 1, len(c) - 1)
    lo = hi - 1
    frac = (y - c[lo]) / (c[hi] - c[lo])
    out = np.zeros(v.shape + (len(c),))
    np.put_along_axis(out, lo[..., None], (1.0 - frac)[..., None], axis=-1)
    np.put_along_axis(out, hi[..., None], frac[..., None], axis=-1)
    return out


def expected_value(logits, bins: RewardBins) -> np.ndarray:
    """``symexp(sum softmax(logits) * centers)`` (no gradient)."""
    x = np.asarray(getattr(logits, "data", logits))
    x = x - x.max(axis=-1, keepdims=True)
    p = np.exp(x)
    p /= p.sum(axis=-1, keepdims=True)
    return symexp((p * bins.centers).sum(axis=-1))


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row ``-sum target * log_softmax(logits)``."""
    return T.scale(T.sum_(T.mul(T.log_softmax(logits), target), axis=-1), -1.0)


def bce_with_logits(logit: Tensor, label: np.ndarray) -> Tensor:
    """Per-element binary cross-entropy ``softplus(l) - y * l``."""
    return T.sub(T.softplus(logit), T.mul(logit, label))


def unimix_probs(logits, mix: float) -> Tensor:
    """``(1 - mix) * softmax + mix / C`` over the last axis."""
    logits = T._wrap(logits)
    c = logits.shape[-1]
    return T.add(T.scale(T.softmax(logits), 1.0 - mix), mix / c)


# ---------------------------------------------------------------------------
# configuration and state

@dataclass(frozen=True)
class LossWeights:
    pred: float = 1.0
    dyn: float = 1.0
    rep: float = 0.1
    free_nats: float = 1.0
    unimix: float = 0.01

    def __post_init__(self):
        if min(self.pred, self.dyn, self.rep, self.free_nats, self.unimix) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class RssmState:
    """Deterministic ``h`` [N, H] and flattened one-hot latent ``z`` [N, S*C]."""

    h: object
    z: object

    @property
    def feat(self):
        return T.concat([self.h, self.z], axis=-1)


@dataclass(frozen=True)
class WorldModelConfig:
    encoder: BackboneSpec
    decoder: BackboneSpec
    reward: BackboneSpec
    cont: BackboneSpec
    prior: BackboneSpec
    obs_shape: tuple = (16, 16, 3)
    action_dim: int = 2
    h_dim: int = 128
    groups: int = 8
    classes: int = 8
    bins: RewardBins = field(default_factory=RewardBins)
    reward_mode: str = "twohot"
    latent_mode: str = "sample"

    @property
    def z_dim(self) -> int:
        return self.groups * self.classes

    @property
    def feat_dim(self) -> int:
        return self.h_dim + self.z_dim

    def __post_init__(self):
        if self.reward_mode not in ("twohot", "regression"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if self.latent_mode not in ("sample", "probs"):
            raise ValueError(f"unknown latent mode {self.latent_mode!r}")
        for name in ("reward", "cont", "decoder"):
            spec = getattr(self, name)
            if spec.in_dim != self.feat_dim:
                raise DimensionError(f"{name} head input {spec.in_dim} != h+z dim {self.feat_dim}")
        if self.encoder.cond_dim != self.h_dim or tuple(self.encoder.image_shape) != tuple(self.obs_shape):
            raise DimensionError("encoder must consume the observation plus h")
        if self.encoder.out_dim != self.z_dim or self.prior.out_dim != self.z_dim:
            raise DimensionError("encoder and prior must emit S*C logits")


def make_world_model_config(perception: str = "cnn", prediction: str = "mlp", *,
                            obs_shape=(16, 16, 3), action_dim: int = 2, h_dim: int = 128,
                            groups: int = 8, classes: int = 8, bins: RewardBins | None = None,
                            encoder_units: int = 8, decoder_units: int | None = None,
                            reward_units: int = 64, cont_units: int | None = None,
                            prior_units: int = 128, hidden_layers: int = 1,
                            reward_mode: str = "twohot", latent_mode: str = "sample",
                            **backbone_kw) -> WorldModelConfig:
    """Assemble specs for one ablation cell (perception kind x prediction kind)."""
    bins = bins or RewardBins()
    z_dim = groups * classes
    feat = h_dim + z_dim
    flat = perception != "cnn"
    decoder_units = encoder_units if decoder_units is None else decoder_units
    cont_units = reward_units if cont_units is None else cont_units
    enc = BackboneSpec(perception, out_dim=z_dim, units=encoder_units, num_hidden_layers=hidden_layers,
                       role="encoder", image_shape=tuple(obs_shape), cond_dim=h_dim, flatten=flat,
                       **backbone_kw)
    dec = BackboneSpec(perception, in_dim=feat, units=decoder_units, num_hidden_layers=hidden_layers,
                       role="decoder", image_shape=tuple(obs_shape), flatten=flat, **backbone_kw)
    rew_out = bins.count if reward_mode == "twohot" else 1
    rew = BackboneSpec(prediction, in_dim=feat, out_dim=rew_out, units=reward_units,
                       num_hidden_layers=hidden_layers, zero_output=True, **backbone_kw)
    con = BackboneSpec(prediction, in_dim=feat, out_dim=1, units=cont_units,
                       num_hidden_layers=hidden_layers, **backbone_kw)
    prior = BackboneSpec("mlp", in_dim=h_dim, out_dim=z_dim, units=prior_units, num_hidden_layers=1)
    return WorldModelConfig(encoder=enc, decoder=dec, reward=rew, cont=con, prior=prior,
                            obs_shape=tuple(obs_shape), action_dim=action_dim, h_dim=h_dim,
                            groups=groups, classes=classes, bins=bins, reward_mode=reward_mode,
                            latent_mode=latent_mode)


HEADS = {"enc/": "encoder", "dec/": "decoder", "rew/": "reward", "con/": "cont", "prior/": "prior"}


def gru_shapes(cfg: WorldModelConfig) -> dict[str, tuple]:
    n_in = cfg.h_dim + cfg.z_dim + cfg.action_dim
    return {
        "gru/w_gates": (2 * cfg.h_dim, n_in), "gru/b_gates": (2 * cfg.h_dim,),
        "gru/w_cand": (cfg.h_dim, n_in), "gru/b_cand": (cfg.h_dim,),
    }


def init_world_model(cfg: WorldModelConfig, seed) -> dict[str, np.ndarray]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in gru_shapes(cfg).items():
        if name.startswith("gru/w"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
        else:
            params[name] = np.zeros(shape)
    params["h0"] = np.zeros(cfg.h_dim)
    for prefix, attr in HEADS.items():
        for k, v in init_backbone(getattr(cfg, attr), rng).items():
            params[prefix + k] = v
    return params


def world_model_frozen(cfg: WorldModelConfig) -> set[str]:
    out: set[str] = set()
    for prefix, attr in HEADS.items():
        out |= frozen_names(getattr(cfg, attr), prefix)
    return out


def world_model_param_count(cfg: WorldModelConfig) -> int:
    gru = sum(int(np.prod(s)) for s in gru_shapes(cfg).values()) + cfg.h_dim
    return gru + sum(param_count(getattr(cfg, a)) for a in HEADS.values())


# ---------------------------------------------------------------------------
# RSSM pieces

def gru_step(h, z, a, params: Mapping) -> Tensor:
    """Gated recurrent update ``h' = u * h + (1 - u) * tanh(W [r * h, z, a])``."""
    h, z, a = T._wrap(h), T._wrap(z), T._wrap(a)
    hd = h.shape[-1]
    x = T.concat([h, z, a], axis=-1)
    w = params.get("gru/w_gates", params.get("w_gates"))
    b = params.get("gru/b_gates", params.get("b_gates"))
    wc = params.get("gru/w_cand", params.get("w_cand"))
    bc = params.get("gru/b_cand", params.get("b_cand"))
    if w is None or np.shape(getattr(w, "data", w))[1] != x.shape[-1]:
        raise DimensionError(f"gru input width {x.shape[-1]} does not match weights")
    gates = T.sigmoid(T.linear(x, w, b))
    r = T.getitem(gates, (slice(None), slice(0, hd)))
    u = T.getitem(gates, (slice(None), slice(hd, 2 * hd)))
    cand = T.tanh(T.linear(T.concat([T.mul(r, h), z, a], axis=-1), wc, bc))
    return T.add(T.mul(u, h), T.mul(T.sub(1.0, u), cand))


def _logits(cfg: WorldModelConfig, flat: Tensor) -> Tensor:
    return T.reshape(flat, (flat.shape[0], cfg.groups, cfg.classes))


def encode_posterior(x, h, params: Mapping, cfg: WorldModelConfig) -> Tensor:
    """Posterior logits [N, S, C] from scaled pixels ``x`` [N, H, W, C] and ``h``."""
    out = backbone_forward(cfg.encoder, subparams(params, "enc/"), x, cond=h)
    return _logits(cfg, out)


def predict_prior(h, params: Mapping, cfg: WorldModelConfig) -> Tensor:
    return _logits(cfg, backbone_forward(cfg.prior, subparams(params, "prior/"), h))


def sample_latent(probs, rng: np.random.Generator, mode: str = "sample") -> Tensor:
    """One-hot sample per group with straight-through gradients; [N, S, C] -> [N, S*C].

    ``mode="probs"`` returns the probabilities themselves (used for gradient checks).
    """
    probs = T._wrap(probs)
    p = probs.data
    if np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6 or (p < 0).any():
        raise ValueError("latent probabilities must be normalized")
    n = p.shape[0]
    if mode == "probs":
        return T.reshape(probs, (n, -1))
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1] + (1,))
    idx = np.minimum((u > cdf).sum(axis=-1), p.shape[-1] - 1)
    hard = np.zeros_like(p)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return T.reshape(T.straight_through(hard, probs), (n, -1))


def decode_observation(h, z, params: Mapping, cfg: WorldModelConfig) -> Tensor:
    feat = T.concat([T._wrap(h), T._wrap(z)], axis=-1)
    return backbone_forward(cfg.decoder, subparams(params, "dec/"), feat)


def predict_reward(feat, params: Mapping, cfg: WorldModelConfig) -> Tensor:
    return backbone_forward(cfg.reward, subparams(params, "rew/"), feat)


def predict_continue(feat, params: Mapping, cfg: WorldModelConfig) -> Tensor:
    """Continue logit [N, 1]; probability is its sigmoid."""
    return backbone_forward(cfg.cont, subparams(params, "con/"), feat)


def reward_loss(logits: Tensor, rewards: np.ndarray, cfg: WorldModelConfig) -> Tensor:
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if cfg.reward_mode == "regression":
        diff = T.sub(T.reshape(logits, (-1,)), symlog(r))
        return T.mean(T.square(diff))
    return T.mean(cross_entropy(logits, two_hot_encode(r, cfg.bins)))


def decode_reward(logits, cfg: WorldModelConfig) -> np.ndarray:
    x = np.asarray(getattr(logits, "data", logits))
    if cfg.reward_mode == "regression":
        return symexp(x.reshape(x.shape[:-1]))
    return expected_value(x, cfg.bins)


def continue_loss(logit: Tensor, labels: np.ndarray) -> Tensor:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    return T.mean(bce_with_logits(T.reshape(logit, (-1,)), y))


def categorical_kl(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) summed over classes and averaged over groups: [N, S, C] -> [N]."""
    kl = T.sum_(T.mul(p, T.sub(T.log(p), T.log(q))), axis=-1)
    return T.mean(kl, axis=-1)


def kl_balanced(post_logits, prior_logits, weights: LossWeights) -> tuple[Tensor, Tensor]:
    """Dynamics and representation KL terms, each floored at ``free_nats`` per step."""
    post = unimix_probs(post_logits, weights.unimix)
    prior = unimix_probs(prior_logits, weights.unimix)
    dyn = categorical_kl(T.stop_gradient(post), prior)
    rep = categorical_kl(post, T.stop_gradient(prior))
    return (T.mean(T.maximum(dyn, weights.free_nats)),
            T.mean(T.maximum(rep, weights.free_nats)))


# ---------------------------------------------------------------------------
# sequence loss

BATCH_KEYS = ("obs", "action", "reward", "cont", "is_first")


def _check_batch(batch: Mapping, cfg: WorldModelConfig):
    missing = [k for k in BATCH_KEYS if k not in batch]
    if missing:
        raise ValueError(f"batch is missing {missing}")
    b, t = np.shape(batch["is_first"])
    if np.shape(batch["obs"]) != (b, t) + tuple(cfg.obs_shape):
        raise ValueError(f"observations {np.shape(batch['obs'])} do not match [B, T, *obs_shape]")
    if np.shape(batch["action"]) != (b, t, cfg.action_dim):
        raise ValueError("actions must be [B, T, action_dim]")
    if np.shape(batch["reward"]) != (b, t) or np.shape(batch["cont"]) != (b, t):
        raise ValueError("rewards and continue flags must be [B, T]")


def initial_state(params: Mapping, cfg: WorldModelConfig, n: int, rng, weights: LossWeights) -> RssmState:
    """Learned ``h0`` broadcast to ``n`` rows and ``z0`` sampled from the prior at ``h0``."""
    h0 = T.add(np.zeros((n, cfg.h_dim)), params["h0"])
    probs = unimix_probs(predict_prior(h0, params, cfg), weights.unimix)
    return RssmState(h0, sample_latent(probs, rng, cfg.latent_mode))


def observe(batch: Mapping, params: Mapping, cfg: WorldModelConfig, weights: LossWeights, rng):
    """Unroll the posterior over a [B, T] batch.

    Returns stacked ``h`` [B, T, H], ``z`` [B, T, S*C], posterior and prior logits
    [B, T, S, C].  The first step of every window and every ``is_first`` step
    restart from the initial state.
    """
    _check_batch(batch, cfg)
    obs = np.asarray(batch["obs"], dtype=np.float64) - 0.5
    actions = np.asarray(batch["action"], dtype=np.float64)
    first = np.asarray(batch["is_first"], dtype=np.float64).copy()
    first[:, 0] = 1.0
    b, t_len = first.shape
    init = initial_state(params, cfg, b, rng, weights)

    conv_feats = None
    if cfg.encoder.kind == "cnn":
        from .backbones.spec import conv_stack
        from .backbones.layers import conv_apply
        enc = subparams(params, "enc/")
        flat_obs = obs.reshape((b * t_len,) + tuple(cfg.obs_shape))
        f = conv_apply(conv_stack(cfg.encoder, enc), flat_obs, activate_last=True)
        conv_feats = T.reshape(f, (b, t_len, -1))

    hs, zs, posts, priors = [], [], [], []
    h, z = init.h, init.z
    for t in range(t_len):
        m = first[:, t:t + 1]
        if m.any():
            h = T.add(T.mul(init.h, m), T.mul(h, 1.0 - m))
            z = T.add(T.mul(init.z, m), T.mul(z, 1.0 - m))
        a = actions[:, t] * (1.0 - m)
        h = gru_step(h, z, a, params)
        if conv_feats is not None:
            feat_t = T.getitem(conv_feats, (slice(None), t))
            post_logits = _logits(cfg, T.linear(T.concat([feat_t, h], axis=-1),
                                                params["enc/proj.weight"], params["enc/proj.bias"]))
        else:
            post_logits = encode_posterior(obs[:, t], h, params, cfg)
        z = sample_latent(unimix_probs(post_logits, weights.unimix), rng, cfg.latent_mode)
        prior_logits = predict_prior(h, params, cfg)
        hs.append(h)
        zs.append(z)
        posts.append(post_logits)
        priors.append(prior_logits)
    return (T.stack(hs, axis=1), T.stack(zs, axis=1), T.stack(posts, axis=1), T.stack(priors, axis=1))


def world_model_loss(batch: Mapping, params: Mapping, cfg: WorldModelConfig,
                     weights: LossWeights, rng):
    """Total world-model loss plus a component record and the posterior states.

    total = pred * (recon + reward + cont) + dyn * KL_dyn + rep * KL_rep, where
    recon is the per-frame sum of squared pixel errors on [-0.5, 0.5] pixels.
    """
    hs, zs, posts, priors = observe(batch, params, cfg, weights, rng)
    b, t_len = hs.shape[:2]
    n = b * t_len
    h_flat = T.reshape(hs, (n, cfg.h_dim))
    z_flat = T.reshape(zs, (n, cfg.z_dim))
    feat = T.concat([h_flat, z_flat], axis=-1)

    target = np.asarray(batch["obs"], dtype=np.float64).reshape((n,) + tuple(cfg.obs_shape)) - 0.5
    recon_img = decode_observation(h_flat, z_flat, params, cfg)
    diff = T.sub(recon_img, target)
    recon = T.mean(T.sum_(T.square(diff), axis=(1, 2, 3)))
    rew = reward_loss(predict_reward(feat, params, cfg), batch["reward"], cfg)
    con = continue_loss(predict_continue(feat, params, cfg), batch["cont"])
    shape = (n, cfg.groups, cfg.classes)
    dyn, rep = kl_balanced(T.reshape(posts, shape), T.reshape(priors, shape), weights)

    pred_term = T.scale(T.add(T.add(recon, rew), con), weights.pred)
    dyn_term = T.scale(dyn, weights.dyn)
    rep_term = T.scale(rep, weights.rep)
    total = T.add(T.add(pred_term, dyn_term), rep_term)
    comps = {
        "recon": recon.item(), "reward": rew.item(), "cont": con.item(),
        "dyn": dyn.item(), "rep": rep.item(),
        "pred_term": pred_term.item(), "dyn_term": dyn_term.item(), "rep_term": rep_term.item(),
        "total": total.item(),
    }
    states = RssmState(hs.data.copy(), zs.data.copy())
    return total, comps, states


def filter_step(state: RssmState | None, action, obs, params: Mapping, cfg: WorldModelConfig,
                weights: LossWeights, rng) -> RssmState:
    """One posterior update while acting; ``state=None`` marks an episode start."""
    with T.no_grad():
        x = np.asarray(obs, dtype=np.float64)[None] - 0.5
        if state is None:
            init = initial_state(params, cfg, 1, rng, weights)
            h, z, a = init.h, init.z, np.zeros((1, cfg.action_dim))
        else:
            h, z, a = state.h, state.z, np.asarray(action, dtype=np.float64).reshape(1, -1)
        h = gru_step(h, z, a, params)
        probs = unimix_probs(encode_posterior(x, h, params, cfg), weights.unimix)
        z = sample_latent(probs, rng)
        return RssmState(h.data, z.data)
