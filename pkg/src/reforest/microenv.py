"""Tiny vision-free env for checking that the trainer learns at all."""

from __future__ import annotations

import numpy as np


class BeaconEnv:
    """Agents on a line steer toward a fixed beacon with the first action.

    Reward per step is the negative distance to the beacon divided by the
    track half-length. Observations are ``[position, offset_to_beacon]``
    scaled to [-1, 1], stacked with the previous step.
    """

    def __init__(self, n_agents: int = 4, episode_length: int = 25, half_length: float = 10.0,
                 beacon: float = 6.0, seed: int = 0):
        self.n_agents = n_agents
        self.episode_length = episode_length
        self.half_length = half_length
        self.beacon = beacon
        self.rng = np.random.default_rng(seed)
        self.pos = np.zeros(n_agents)
        self.t = 0
        self._prev = None

    vector_dim = 4

    def _obs(self):
        h = self.half_length
        cur = np.stack([self.pos / h, np.clip((self.beacon - self.pos) / h, -1, 1)], axis=1)
        prev = cur if self._prev is None else self._prev
        self._prev = cur
        return np.concatenate([prev, cur], axis=1).astype(np.float32), None

    def reset(self):
        self.pos = self.rng.uniform(-self.half_length, self.half_length, self.n_agents)
        self.t = 0
        self._prev = None
        self._total = 0.0
        return self._obs()

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        self.pos = np.clip(self.pos + np.clip(actions[:, 0], -1, 1), -self.half_length, self.half_length)
        rewards = -np.abs(self.beacon - self.pos) / self.half_length
        self._total += rewards.sum()
        self.t += 1
        vec, vis = self._obs()
        done = self.t >= self.episode_length
        info = {"episode": {"cumulative_reward": self._total / self.n_agents}} if done else {}
        return vec, vis, rewards, done, info
