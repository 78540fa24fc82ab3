"""Ring replay buffer that samples contiguous windows of time steps."""

from __future__ import annotations

import threading
from pathlib import Path

import numpy as np

from .backbones.checkpoint import load_checkpoint, save_checkpoint
from .env import Transition

DEFAULT_CAPACITY = 100_000
FULL_SCALE_CAPACITY = 5_000_000
FIELDS = ("obs", "action", "reward", "cont", "is_first")


class NotReadyError(RuntimeError):
    """Raised when the buffer holds fewer steps than one window."""


class EpisodeBuffer:
    def __init__(self, capacity: int = DEFAULT_CAPACITY, obs_shape=(16, 16, 3), action_dim: int = 2):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._obs = np.zeros((capacity,) + tuple(obs_shape), dtype=np.float32)
        self._action = np.zeros((capacity, action_dim))
        self._reward = np.zeros(capacity)
        self._cont = np.zeros(capacity)
        self._first = np.zeros(capacity)
        self._added = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return min(self._added, self.capacity)

    @property
    def total_added(self) -> int:
        return self._added

    def add(self, tr: Transition) -> None:
        with self._lock:
            i = self._added % self.capacity
            self._obs[i] = tr.obs
            self._action[i] = tr.action
            self._reward[i] = tr.reward
            self._cont[i] = tr.cont
            self._first[i] = tr.is_first
            self._added += 1

    def _physical(self, logical: np.ndarray) -> np.ndarray:
        # logical 0 is the oldest stored step, so windows never wrap past the newest one
        oldest = self._added - len(self)
        return (oldest + logical) % self.capacity

    def sample(self, batch: int, length: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Independent copies of ``batch`` uniformly placed windows of ``length`` steps."""
        with self._lock:
            n = len(self)
            if n < length:
                raise NotReadyError(f"need {length} stored steps to sample, have {n}")
            starts = rng.integers(0, n - length + 1, size=batch)
            idx = self._physical(starts[:, None] + np.arange(length)[None, :])
            return {
                "obs": self._obs[idx].copy(),
                "action": self._action[idx].copy(),
                "reward": self._reward[idx].copy(),
                "cont": self._cont[idx].copy(),
                "is_first": self._first[idx].copy(),
                "start": starts,
            }


def dump_episode(directory, transitions: list[Transition], meta: dict | None = None) -> Path:
    """Write one episode as a manifest plus one raw float32 file per field."""
    arrays = {
        "obs": np.stack([t.obs for t in transitions]),
        "action": np.stack([t.action for t in transitions]),
        "reward": np.array([t.reward for t in transitions]),
        "cont": np.array([t.cont for t in transitions]),
        "is_first": np.array([t.is_first for t in transitions]),
    }
    return save_checkpoint(directory, arrays, kinds={k: "episode" for k in arrays}, extra=meta)


def load_episode(directory) -> list[Transition]:
    arrays, _ = load_checkpoint(directory)
    return [Transition(arrays["obs"][i].astype(np.float32), arrays["action"][i], float(arrays["reward"][i]),
                       float(arrays["cont"][i]), float(arrays["is_first"][i]))
            for i in range(len(arrays["reward"]))]
