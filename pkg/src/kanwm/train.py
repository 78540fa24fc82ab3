"""Collect-and-train loop, throughput counters and run directories."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .backbones.checkpoint import save_checkpoint
from .behavior import (
    BehaviorConfig, ReturnNormalizer, actor_loss, behavior_frozen, behavior_param_count,
    critic_loss, critic_params, ema_update, imagine_rollout, init_behavior, lambda_returns,
    sample_action, update_return_normalizer,
)
from .config import ExperimentConfig, dump_config
from .core import tensor as T
from .core.optim import OptimizerState, agc_clip, laprop_step
from .core.tensor import NonFiniteError
from .env import DotReacher, oracle_return
from .replay import EpisodeBuffer
from .sizing import ModelSizing, size_models
from .worldmodel import (
    LossWeights, RssmState, WorldModelConfig, filter_step, init_world_model,
    world_model_frozen, world_model_loss, world_model_param_count,
)

TIMING_KEYS = ("wall_seconds", "fps_policy", "fps_train")


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; a diagnostic dump was written."""


def measure_fps(env_steps: int, updates: int, batch_size: int, batch_length: int,
                elapsed: float) -> tuple[float, float]:
    """``(env steps / s, replayed frames / s)`` over ``elapsed`` wall seconds."""
    if elapsed <= 0:
        raise ValueError("elapsed time must be positive")
    return env_steps / elapsed, batch_size * batch_length * updates / elapsed


def updates_due(env_steps: int, ratio: float) -> int:
    return math.floor(env_steps * ratio + 1e-9)


def gradient_step(params: Mapping[str, np.ndarray], frozen: set, loss_fn: Callable,
                  opt: OptimizerState, clip: float):
    """Differentiate ``loss_fn(params) -> (loss, aux)``, clip, and apply one LaProp step."""
    train = {k: T.parameter(v) for k, v in params.items() if k not in frozen}
    loss, aux = loss_fn({**params, **train})
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"loss evaluated to {value}")
    grads = T.backward(loss, train)
    current = {k: params[k] for k in train}
    new, opt = laprop_step(opt, agc_clip(grads, current, clip), current)
    return {**params, **new}, opt, value, aux


@dataclass
class Agent:
    cfg: ExperimentConfig
    wm_cfg: WorldModelConfig
    bc: BehaviorConfig
    sizing: ModelSizing
    wm: dict
    beh: dict
    ema: dict
    wm_opt: OptimizerState
    actor_opt: OptimizerState
    critic_opt: OptimizerState
    norm: ReturnNormalizer
    weights: LossWeights
    wm_frozen: set = field(default_factory=set)
    actor_frozen: set = field(default_factory=set)
    critic_frozen: set = field(default_factory=set)

    @classmethod
    def create(cls, cfg: ExperimentConfig, rng: np.random.Generator) -> "Agent":
        wm_cfg, bc, sizing = size_models(cfg)
        wm = init_world_model(wm_cfg, rng)
        beh = init_behavior(bc, rng)
        opt = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        wm_frozen = world_model_frozen(wm_cfg)
        bfrozen = behavior_frozen(bc)
        actor_keys = {k for k in beh if k.startswith("actor/")}
        critic_keys = set(beh) - actor_keys
        return cls(
            cfg=cfg, wm_cfg=wm_cfg, bc=bc, sizing=sizing, wm=wm, beh=beh, ema=critic_params(beh),
            wm_opt=OptimizerState.zeros_like({k: v for k, v in wm.items() if k not in wm_frozen}, **opt),
            actor_opt=OptimizerState.zeros_like({k: beh[k] for k in actor_keys - bfrozen}, **opt),
            critic_opt=OptimizerState.zeros_like({k: beh[k] for k in critic_keys - bfrozen}, **opt),
            norm=ReturnNormalizer(decay=cfg.retnorm_decay, limit=cfg.retnorm_limit,
                                  low=cfg.retnorm_low, high=cfg.retnorm_high),
            weights=LossWeights(pred=cfg.loss_pred, dyn=cfg.loss_dyn, rep=cfg.loss_rep,
                                free_nats=cfg.free_nats, unimix=cfg.latent_unimix),
            wm_frozen=wm_frozen, actor_frozen=bfrozen | critic_keys, critic_frozen=bfrozen | actor_keys,
        )

    @property
    def param_count(self) -> int:
        return world_model_param_count(self.wm_cfg) + behavior_param_count(self.bc)

    def act(self, state: RssmState, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
        feat = np.concatenate([state.h, state.z], axis=-1)
        return sample_action(feat, self.beh, self.bc, rng, greedy=greedy)[0][0]

    def observe(self, state, action, obs, rng) -> RssmState:
        return filter_step(state, action, obs, self.wm, self.wm_cfg, self.weights, rng)

    def train_step(self, batch: Mapping, rng: np.random.Generator) -> dict:
        """One world-model update followed by one actor and one critic update."""
        def wm_loss(p):
            total, comps, states = world_model_loss(batch, p, self.wm_cfg, self.weights, rng)
            return total, (comps, states)

        self.wm, self.wm_opt, _, (comps, states) = gradient_step(
            self.wm, self.wm_frozen, wm_loss, self.wm_opt, self.cfg.agc)
        h = states.h.reshape(-1, states.h.shape[-1])
        z = states.z.reshape(-1, states.z.shape[-1])
        if 0 < self.cfg.imag_starts < len(h):
            keep = np.sort(rng.choice(len(h), self.cfg.imag_starts, replace=False))
            h, z = h[keep], z[keep]
        start = RssmState(h, z)
        traj = imagine_rollout(start, self.bc.horizon, self.wm, self.wm_cfg, self.beh, self.bc, rng,
                               unimix=self.weights.unimix)
        returns = lambda_returns(traj.rewards, traj.values, traj.continues, self.bc.lam, self.bc.gamma)
        self.norm, divisor = update_return_normalizer(self.norm, returns)

        self.beh, self.actor_opt, a_loss, _ = gradient_step(
            self.beh, self.actor_frozen,
            lambda p: (actor_loss(traj, returns, traj.values, divisor, p, self.bc), None),
            self.actor_opt, self.cfg.agc)
        self.beh, self.critic_opt, c_loss, _ = gradient_step(
            self.beh, self.critic_frozen,
            lambda p: (critic_loss(traj, returns, p, self.ema, self.bc), None),
            self.critic_opt, self.cfg.agc)
        self.ema = ema_update(self.ema, self.beh, self.bc.critic_ema_decay)
        return {**{f"wm_{k}": v for k, v in comps.items()}, "actor_loss": a_loss, "critic_loss": c_loss,
                "return_scale": self.norm.scale, "imagined_return": float(returns[0].mean())}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"wm/{k}": v for k, v in self.wm.items()}
        out.update({f"behavior/{k}": v for k, v in self.beh.items()})
        out.update({f"ema/{k}": v for k, v in self.ema.items()})
        return out


def evaluate(agent: Agent, episodes: int, rng: np.random.Generator) -> float:
    """Mean return of the mean-action policy."""
    env = DotReacher(rng)
    total = 0.0
    for _ in range(episodes):
        tr = env.reset()
        state = agent.observe(None, None, tr.obs, rng)
        while True:
            a = agent.act(state, rng, greedy=True)
            tr = env.step(a)
            total += tr.reward
            if tr.cont == 0.0:
                break
            state = agent.observe(state, a, tr.obs, rng)
    return total / episodes


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _dump_diagnostic(run_dir: Path, agent: Agent, step: int, err: Exception, batch) -> None:
    d = run_dir / "diagnostic"
    save_checkpoint(d / "params", agent.arrays())
    info = {"env_step": step, "error": f"{type(err).__name__}: {err}"}
    if batch is not None:
        info["batch"] = {k: {"min": float(np.min(v)), "max": float(np.max(v))}
                         for k, v in batch.items() if k != "start"}
    (d / "diagnostic.json").write_text(json.dumps(info, indent=2))


def train_loop(cfg: ExperimentConfig, outdir, *, run_id: str | None = None,
               progress: Callable[[dict], None] | None = None) -> Path:
    """Run one experiment and return its directory.

    The directory holds ``config.yaml``, append-only ``metrics.jsonl``,
    ``checkpoint/`` and ``summary.json``.
    """
    run_dir = Path(outdir) / (run_id or cfg.run_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.yaml")
    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    init_rng, env_rng, act_rng, train_rng, eval_seq = (np.random.default_rng(s) for s in seeds)

    with T.precision(cfg.precision):
        agent = Agent.create(cfg, init_rng)
        buffer = EpisodeBuffer(cfg.replay_capacity)
        env = DotReacher(env_rng)
        tr = env.reset()
        buffer.add(tr)
        state = agent.observe(None, None, tr.obs, act_rng)
        ep_return, recent = 0.0, []
        updates, last, batch = 0, {}, None
        eval_return = None
        metrics_path = run_dir / "metrics.jsonl"
        metrics_path.write_text("")
        t0 = time.perf_counter()
        with metrics_path.open("a") as fh:
            for step in range(1, cfg.env_steps + 1):
                action = agent.act(state, act_rng)
                tr = env.step(action)
                buffer.add(tr)
                ep_return += tr.reward
                if tr.cont == 0.0:
                    recent.append(ep_return)
                    ep_return = 0.0
                    tr = env.reset()
                    buffer.add(tr)
                    state = agent.observe(None, None, tr.obs, act_rng)
                else:
                    state = agent.observe(state, action, tr.obs, act_rng)

                while updates < updates_due(step, cfg.train_ratio) and len(buffer) >= cfg.batch_length:
                    try:
                        batch = buffer.sample(cfg.batch_size, cfg.batch_length, train_rng)
                        last = agent.train_step(batch, train_rng)
                    except (NonFiniteError, FloatingPointError) as err:
                        _dump_diagnostic(run_dir, agent, step, err, batch)
                        raise TrainingAborted(f"non-finite value at env step {step}: {err}") from err
                    updates += 1

                final = step == cfg.env_steps
                if step % cfg.eval_every == 0 or final:
                    episodes = cfg.final_eval_episodes if final else cfg.eval_episodes
                    eval_return = evaluate(agent, episodes, np.random.default_rng(eval_seq.integers(2**63)))
                if step % cfg.log_every == 0 or final:
                    elapsed = time.perf_counter() - t0
                    fps_pol, fps_trn = measure_fps(step, updates, cfg.batch_size, cfg.batch_length, elapsed)
                    record = {
                        "env_step": step, "wall_seconds": elapsed, "updates": updates,
                        "episode_return": float(np.mean(recent)) if recent else None,
                        "episodes": len(recent), "eval_return": eval_return,
                        **last, "fps_policy": fps_pol, "fps_train": fps_trn,
                    }
                    fh.write(json.dumps(record, default=_json_default) + "\n")
                    fh.flush()
                    recent, eval_return = [], None
                    if progress:
                        progress(record)
        elapsed = time.perf_counter() - t0

    save_checkpoint(run_dir / "checkpoint", agent.arrays(), extra={"run_id": run_dir.name})
    fps_pol, fps_trn = measure_fps(cfg.env_steps, updates, cfg.batch_size, cfg.batch_length, elapsed)
    final_return = json.loads(metrics_path.read_text().splitlines()[-1])["eval_return"]
    summary = {
        "run_id": run_dir.name, "group": cfg.group, "backbone": cfg.backbone, "seed": cfg.seed,
        "final_return": final_return, "oracle_return": oracle_return(),
        "fps_policy": fps_pol, "fps_train": fps_trn, "params": agent.param_count,
        "env_steps": cfg.env_steps, "updates": updates, "wall_seconds": elapsed,
        "sizing": agent.sizing.to_dict(),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default))
    return run_dir


def read_metrics(run_dir) -> list[dict]:
    return [json.loads(line) for line in (Path(run_dir) / "metrics.jsonl").read_text().splitlines() if line]


def deterministic_view(records: list[dict]) -> list[dict]:
    """Metric records without wall-clock derived fields."""
    return [{k: v for k, v in r.items() if k not in TIMING_KEYS} for r in records]


def check_run(run_dir, cfg: ExperimentConfig) -> list[str]:
    """Post-run invariant spot-checks; returns a list of failures."""
    problems = []
    records = read_metrics(run_dir)
    if not records:
        return ["no metric records"]
    steps = [r["env_step"] for r in records]
    walls = [r["wall_seconds"] for r in records]
    if steps != sorted(steps) or len(set(steps)) != len(steps):
        problems.append("env_step not strictly increasing")
    if walls != sorted(walls):
        problems.append("wall_seconds not monotone")
    want = updates_due(cfg.env_steps, cfg.train_ratio)
    if abs(records[-1]["updates"] - want) > 1:
        problems.append(f"updates {records[-1]['updates']} != floor(steps * ratio) = {want}")
    for r in records:
        for k, v in r.items():
            if isinstance(v, float) and not math.isfinite(v):
                problems.append(f"non-finite {k} at step {r['env_step']}")
    if not (Path(run_dir) / "summary.json").exists():
        problems.append("summary.json missing")
    return problems
