"""Dot-reacher: a tiny pixel-only reaching task.

The agent (a 2x2 block in channel 0) moves toward a target (channel 1) on a
16x16 canvas.  Observations carry no state vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

STEP_SCALE = 0.08
SUCCESS_RADIUS = 0.08
MAX_STEPS = 100
IMAGE_SIZE = 16
BLOCK = 2
ACTION_DIM = 2
MIN_START_DISTANCE = 0.2


@dataclass(frozen=True)
class DotReacherState:
    agent: tuple[float, float]
    target: tuple[float, float]
    step: int = 0

    def distance(self) -> float:
        return math.dist(self.agent, self.target)


@dataclass(frozen=True)
class Transition:
    """One stored step: ``action`` is the action that produced ``obs`` (zeros after reset)."""

    obs: np.ndarray
    action: np.ndarray
    reward: float
    cont: float
    is_first: float


def _cell(p: float) -> int:
    return min(int(round(p * (IMAGE_SIZE - BLOCK))), IMAGE_SIZE - BLOCK)


def render_observation(state: DotReacherState) -> np.ndarray:
    """Float32 image [16, 16, 3] in [0, 1]; x maps to columns, y to rows."""
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    for channel, (x, y) in ((1, state.target), (0, state.agent)):
        r, c = _cell(y), _cell(x)
        img[r:r + BLOCK, c:c + BLOCK, channel] = 1.0
    return img


def dot_reacher_reset(rng: np.random.Generator) -> tuple[DotReacherState, Transition]:
    while True:
        agent, target = rng.random(2), rng.random(2)
        if math.dist(agent, target) >= MIN_START_DISTANCE:
            break
    state = DotReacherState(tuple(map(float, agent)), tuple(map(float, target)), 0)
    return state, Transition(render_observation(state), np.zeros(ACTION_DIM), 0.0, 1.0, 1.0)


def dot_reacher_step(state: DotReacherState, action) -> tuple[DotReacherState, Transition]:
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(ACTION_DIM), -1.0, 1.0)
    pos = np.clip(np.asarray(state.agent) + STEP_SCALE * a, 0.0, 1.0)
    new = DotReacherState((float(pos[0]), float(pos[1])), state.target, state.step + 1)
    dist = new.distance()
    if dist < SUCCESS_RADIUS:
        reward, cont = 1.0, 0.0
    else:
        reward = max(0.0, 1.0 - dist / math.sqrt(2.0))
        cont = 0.0 if new.step >= MAX_STEPS else 1.0
    return new, Transition(render_observation(new), a, reward, cont, 0.0)


def scripted_action(state: DotReacherState) -> np.ndarray:
    """Full-speed straight line toward the target."""
    d = np.asarray(state.target) - np.asarray(state.agent)
    m = np.abs(d).max()
    return d / m if m > 0 else np.zeros(ACTION_DIM)


class DotReacher:
    """Stateful wrapper with a gym-like ``reset``/``step`` surface."""

    def __init__(self, seed=None):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.state: DotReacherState | None = None

    def reset(self) -> Transition:
        self.state, tr = dot_reacher_reset(self.rng)
        return tr

    def step(self, action) -> Transition:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state, tr = dot_reacher_step(self.state, action)
        return tr


def run_episode(policy, rng: np.random.Generator) -> tuple[float, int]:
    """Return and length of one episode; ``policy`` maps (state, obs) to an action."""
    state, tr = dot_reacher_reset(rng)
    total, steps = 0.0, 0
    while True:
        state, tr = dot_reacher_step(state, policy(state, tr.obs))
        total += tr.reward
        steps += 1
        if tr.cont == 0.0:
            return total, steps


def oracle_return(episodes: int = 100, seed: int = 0) -> float:
    """Mean return of the scripted policy; the ceiling used to normalize scores."""
    rng = np.random.default_rng(seed)
    return float(np.mean([run_episode(lambda s, _: scripted_action(s), rng)[0] for _ in range(episodes)]))
