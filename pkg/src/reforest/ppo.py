"""PPO-Clip with GAE, shared parameters across agents and an optional curiosity bonus."""

from __future__ import annotations

import dataclasses
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import nn as rnn


class LengthMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    epsilon: float = 0.2
    beta: float = 0.005
    learning_rate: float = 3e-4
    num_epochs: int = 3
    batch_size: int = 1024
    buffer_size: int = 10240
    time_horizon: int = 100
    max_steps: int = 10_000_000
    value_coef: float = 0.5
    extrinsic_strength: float = 0.9
    curiosity: str = "off"
    curiosity_strength: float = 0.1
    curiosity_encoding: int = 256
    curiosity_learning_rate: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    summary_freq: int = 20_000
    keep_checkpoints: int = 5
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1 or self.buffer_size % self.batch_size:
            raise ValueError("buffer_size must be a multiple of batch_size")
        if self.curiosity not in ("off", "forward"):
            raise ValueError("curiosity must be 'off' or 'forward'")
        if self.time_horizon < 1 or self.num_epochs < 1:
            raise ValueError("time_horizon and num_epochs must be >= 1")


# ---------------------------------------------------------------------------
# Advantage estimation and surrogate
# ---------------------------------------------------------------------------


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float = 0.99, lam: float = 0.95):
    """GAE over one segment.

    ``dones[t]`` marks that the episode terminated after step ``t``;
    ``bootstrap_value`` is V of the state following the last step and is
    ignored if that step is terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise LengthMismatch(f"rewards/values/dones lengths {len(rewards)}/{len(values)}/{len(dones)}")
    n = len(rewards)
    adv = np.zeros(n)
    next_value = float(bootstrap_value)
    running = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def clip_objective(ratio, advantage, epsilon: float = 0.2):
    """``min(ratio * A, g(eps, A))`` with ``g = (1 + eps) A`` for A >= 0 else ``(1 - eps) A``."""
    if torch.is_tensor(ratio) or torch.is_tensor(advantage):
        g = torch.where(advantage >= 0, (1 + epsilon) * advantage, (1 - epsilon) * advantage)
        return torch.minimum(ratio * advantage, g)
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    g = np.where(advantage >= 0, (1 + epsilon) * advantage, (1 - epsilon) * advantage)
    out = np.minimum(ratio * advantage, g)
    return float(out) if out.ndim == 0 else out


def normalize_advantages(adv: torch.Tensor) -> torch.Tensor:
    if adv.numel() < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std(unbiased=False) + 1e-8)


def learning_rate_at(config: PpoConfig, step: int) -> float:
    return config.learning_rate * max(0.0, 1.0 - step / config.max_steps)


# ---------------------------------------------------------------------------
# Curiosity
# ---------------------------------------------------------------------------


class CuriosityModel(nn.Module):
    """Forward model in a fixed random feature space.

    ``predict(s, a) = phi(s) + W [phi(s), a]``; the encoder ``phi`` is frozen
    so the prediction target cannot collapse. Zero ``W`` is the identity fit.
    """

    def __init__(self, obs_dim: int, action_dim: int, encoding: int = 256, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 7919)
        with torch.random.fork_rng(devices=[]):
            self.encoder = nn.Linear(obs_dim, encoding)
            self.forward_model = nn.Linear(encoding + action_dim, encoding)
        with torch.no_grad():
            bound = (3.0 / obs_dim) ** 0.5
            self.encoder.weight.uniform_(-bound, bound, generator=gen)
            self.encoder.bias.zero_()
        self.encoder.requires_grad_(False)
        with torch.no_grad():
            self.forward_model.weight.zero_()
            self.forward_model.bias.zero_()

    def encode(self, obs: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.encoder(obs))

    def prediction_error(self, obs, action, next_obs) -> torch.Tensor:
        enc = self.encode(obs)
        pred = enc + self.forward_model(torch.cat([enc, action], dim=-1))
        return ((pred - self.encode(next_obs)) ** 2).mean(-1)


def intrinsic_reward(obs, action, next_obs, model: CuriosityModel, strength: float = 0.1) -> np.ndarray:
    with torch.no_grad():
        err = model.prediction_error(torch.as_tensor(obs, dtype=torch.float32),
                                     torch.as_tensor(action, dtype=torch.float32),
                                     torch.as_tensor(next_obs, dtype=torch.float32))
    return strength * err.numpy().astype(np.float64)


def blend_rewards(extrinsic, intrinsic=None, extrinsic_strength: float = 0.9) -> np.ndarray:
    out = extrinsic_strength * np.asarray(extrinsic, dtype=np.float64)
    if intrinsic is not None:
        out = out + intrinsic
    return out


def _flat_obs(vec: np.ndarray, vis: Optional[np.ndarray]) -> np.ndarray:
    if vis is None:
        return vec
    return np.concatenate([vec, vis.reshape(len(vis), -1)], axis=1)


# ---------------------------------------------------------------------------
# Rollout storage
# ---------------------------------------------------------------------------

_FIELDS = ("vector", "visual", "raw", "discrete", "log_prob", "value", "reward", "done")


class RolloutBuffer:
    """Open per-agent segments feeding a flat store of finished transitions."""

    def __init__(self, gamma: float, lam: float):
        self.gamma = gamma
        self.lam = lam
        self._open: dict = {}
        self._done: dict[str, list] = {k: [] for k in ("vector", "visual", "raw", "discrete", "log_prob",
                                                      "value", "advantage", "return")}
        self._size = 0

    def __len__(self) -> int:
        return self._size + sum(len(s["reward"]) for s in self._open.values())

    @property
    def finished(self) -> int:
        return self._size

    def add(self, key, vector, visual, raw, discrete, log_prob, value, reward, done) -> None:
        seg = self._open.setdefault(key, {f: [] for f in _FIELDS})
        for name, val in zip(_FIELDS, (vector, visual, raw, discrete, log_prob, value, reward, done)):
            seg[name].append(val)

    def segment_length(self, key) -> int:
        seg = self._open.get(key)
        return 0 if seg is None else len(seg["reward"])

    def finish(self, key, bootstrap_value: float) -> None:
        seg = self._open.pop(key, None)
        if not seg or not seg["reward"]:
            return
        adv, ret = compute_gae(seg["reward"], seg["value"], seg["done"], bootstrap_value, self.gamma, self.lam)
        d = self._done
        d["vector"].append(np.stack(seg["vector"]))
        d["visual"].append(None if seg["visual"][0] is None else np.stack(seg["visual"]))
        d["raw"].append(np.stack(seg["raw"]))
        d["discrete"].append(np.stack(seg["discrete"]))
        d["log_prob"].append(np.asarray(seg["log_prob"]))
        d["value"].append(np.asarray(seg["value"]))
        d["advantage"].append(adv)
        d["return"].append(ret)
        self._size += len(adv)

    def open_keys(self):
        return list(self._open)

    def flatten(self) -> dict:
        if self._open:
            raise RuntimeError("finish all segments before flattening")
        out = {}
        for k, parts in self._done.items():
            if k == "visual" and (not parts or parts[0] is None):
                out[k] = None
            else:
                out[k] = np.concatenate(parts) if parts else np.zeros(0)
        return out


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainStats:
    update: int
    steps: int
    learning_rate: float
    transitions: int
    mean_ratio_first_epoch: float
    clip_fraction: float
    policy_loss: float
    value_loss: float
    entropy: float
    curiosity_loss: float = 0.0
    max_minibatch_adv_mean: float = 0.0
    max_minibatch_adv_std_error: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


EPISODE_METRICS = (
    "cumulative_reward", "tree_drops", "drop_reward", "return_reward",
    "station_bonus", "out_of_energy", "recharges", "memory_saves",
)


@dataclass
class _EnvSlot:
    env: object
    vector: np.ndarray
    visual: Optional[np.ndarray]


class PpoTrainer:
    """Collects from one or more multi-agent envs into a shared policy.

    An env exposes ``n_agents``, ``reset() -> (vector, visual)`` and
    ``step(actions) -> (vector, visual, rewards, done, info)``; ``info``
    carries an ``"episode"`` metrics dict when ``done``.
    """

    def __init__(self, envs: Sequence, config: PpoConfig, net_config: rnn.NetworkConfig,
                 net: Optional[rnn.PolicyNet] = None):
        config.validate()
        torch.set_num_threads(1)
        self.config = config
        self.net = net if net is not None else rnn.PolicyNet(net_config, seed=config.seed)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=config.learning_rate,
                                          betas=config.adam_betas, eps=config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        self.curiosity = None
        self.curiosity_opt = None
        if config.curiosity == "forward":
            obs_dim = net_config.vector_dim + (net_config.visual_size ** 2 if net_config.visual else 0)
            action_dim = net_config.n_continuous + len(net_config.branches)
            self.curiosity = CuriosityModel(obs_dim, action_dim, config.curiosity_encoding, config.seed)
            self.curiosity_opt = torch.optim.Adam(self.curiosity.forward_model.parameters(),
                                                  lr=config.curiosity_learning_rate)
        self.slots = []
        for env in envs:
            vec, vis = env.reset()
            self.slots.append(_EnvSlot(env, vec, vis))
        self.total_steps = 0
        self.updates = 0
        self.episodes: list[dict] = []
        self._transitions: list = []

    # -- collection ---------------------------------------------------------

    def _act(self, vec, vis, deterministic=False) -> tuple[rnn.ActionSample, np.ndarray]:
        with torch.no_grad():
            out = rnn.forward(self.net, vec, vis)
            sample = rnn.sample_action(out, self.rng, deterministic)
        return sample, out.value.numpy().astype(np.float64)

    def _value(self, vec, vis) -> np.ndarray:
        with torch.no_grad():
            return rnn.forward(self.net, vec, vis).value.numpy().astype(np.float64)

    def collect(self) -> RolloutBuffer:
        cfg = self.config
        buf = RolloutBuffer(cfg.gamma, cfg.lam)
        while len(buf) < cfg.buffer_size:
            for e, slot in enumerate(self.slots):
                vec, vis = slot.vector, slot.visual
                sample, values = self._act(vec, vis)
                actions = sample.env_actions()
                nvec, nvis, rewards, done, info = slot.env.step(actions)
                intrinsic = None
                if self.curiosity is not None:
                    triple = (_flat_obs(vec, vis), actions, _flat_obs(nvec, nvis))
                    self._transitions.append(triple)
                    intrinsic = intrinsic_reward(*triple, self.curiosity, cfg.curiosity_strength)
                shaped = blend_rewards(rewards, intrinsic, cfg.extrinsic_strength)
                n = len(rewards)
                for i in range(n):
                    buf.add((e, i), vec[i], None if vis is None else vis[i], sample.raw_continuous[i],
                            sample.discrete[i], sample.log_prob[i], values[i], shaped[i], 0.0)
                self.total_steps += n
                if done:
                    # time-limit truncation: bootstrap from the final observation
                    boot = self._value(nvec, nvis)
                    for i in range(n):
                        buf.finish((e, i), boot[i])
                    self.episodes.append(dict(info.get("episode", {})))
                    nvec, nvis = slot.env.reset()
                else:
                    full = [i for i in range(n) if buf.segment_length((e, i)) >= cfg.time_horizon]
                    if full:
                        boot = self._value(nvec, nvis)
                        for i in full:
                            buf.finish((e, i), boot[i])
                slot.vector, slot.visual = nvec, nvis
                if len(buf) >= cfg.buffer_size:
                    break
        for e, slot in enumerate(self.slots):
            keys = [k for k in buf.open_keys() if k[0] == e]
            if keys:
                boot = self._value(slot.vector, slot.visual)
                for k in keys:
                    buf.finish(k, boot[k[1]])
        return buf

    # -- optimization -------------------------------------------------------

    def update(self, buffer: RolloutBuffer) -> TrainStats:
        cfg = self.config
        data = buffer.flatten()
        n = len(data["advantage"])
        lr = learning_rate_at(cfg, self.total_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        dtype = next(self.net.parameters()).dtype
        t = {k: (None if v is None else torch.as_tensor(v)) for k, v in data.items()}
        vec = t["vector"].to(dtype)
        vis = None if t["visual"] is None else t["visual"].to(dtype)
        raw = t["raw"].to(dtype)
        disc = t["discrete"].long()
        old_lp = t["log_prob"].to(dtype)
        adv_all = t["advantage"].to(dtype)
        ret = t["return"].to(dtype)

        ratios_first, clipped, pol_losses, val_losses, ents = [], [], [], [], []
        adv_mean_max = adv_std_err = 0.0
        for epoch in range(cfg.num_epochs):
            perm = self.rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = torch.as_tensor(perm[start:start + cfg.batch_size])
                out = self.net(vec[idx], None if vis is None else vis[idx])
                lp = rnn.log_prob(out, raw[idx], disc[idx])
                ratio = torch.exp(lp - old_lp[idx])
                adv = normalize_advantages(adv_all[idx])
                if len(idx) > 1:
                    adv_mean_max = max(adv_mean_max, abs(float(adv.mean())))
                    adv_std_err = max(adv_std_err, abs(float(adv.std(unbiased=False)) - 1.0))
                surrogate = clip_objective(ratio, adv, cfg.epsilon).mean()
                value_loss = ((out.value - ret[idx]) ** 2).mean()
                ent = rnn.entropy(out).mean()
                loss = -surrogate + cfg.value_coef * value_loss - cfg.beta * ent
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"loss became {loss.item()} at update {self.updates}")
                self.optimizer.zero_grad()
                params = [p for p in self.net.parameters()]
                grads = rnn.backward(loss, params)
                for p, g in zip(params, grads):
                    p.grad = g
                self.optimizer.step()
                with torch.no_grad():
                    if epoch == 0:
                        ratios_first.append(ratio.detach())
                    clipped.append((torch.abs(ratio - 1.0) > cfg.epsilon).to(dtype).mean())
                pol_losses.append(-surrogate.item())
                val_losses.append(value_loss.item())
                ents.append(ent.item())

        cur_loss = 0.0
        if self.curiosity is not None:
            cur_loss = self._update_curiosity()
        self.updates += 1
        return TrainStats(
            update=self.updates,
            steps=self.total_steps,
            learning_rate=lr,
            transitions=n,
            mean_ratio_first_epoch=float(torch.cat(ratios_first).mean()) if ratios_first else 1.0,
            clip_fraction=float(torch.stack(clipped).mean()) if clipped else 0.0,
            policy_loss=float(np.mean(pol_losses)) if pol_losses else 0.0,
            value_loss=float(np.mean(val_losses)) if val_losses else 0.0,
            entropy=float(np.mean(ents)) if ents else 0.0,
            curiosity_loss=cur_loss,
            max_minibatch_adv_mean=adv_mean_max,
            max_minibatch_adv_std_error=adv_std_err,
        )

    def _update_curiosity(self) -> float:
        if not self._transitions:
            return 0.0
        s, a, s2 = (torch.as_tensor(np.concatenate(part), dtype=torch.float32)
                    for part in zip(*self._transitions))
        self._transitions = []
        loss = self.curiosity.prediction_error(s, a, s2).mean()
        self.curiosity_opt.zero_grad()
        loss.backward()
        self.curiosity_opt.step()
        return loss.item()

    def train_iteration(self) -> TrainStats:
        return self.update(self.collect())

    def evaluate(self, env, episodes: int = 1, deterministic: bool = True,
                 rng: Optional[np.random.Generator] = None) -> list[dict]:
        """Run full episodes without learning; returns each episode's metrics."""
        saved = self.rng
        if rng is not None:
            self.rng = rng
        results = []
        try:
            for _ in range(episodes):
                vec, vis = env.reset()
                while True:
                    sample, _ = self._act(vec, vis, deterministic)
                    vec, vis, _, done, info = env.step(sample.env_actions())
                    if done:
                        results.append(dict(info.get("episode", {})))
                        break
        finally:
            self.rng = saved
        return results

    def drain_episodes(self) -> list[dict]:
        out, self.episodes = self.episodes, []
        return out

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        """Parameter blob at ``path``; full trainer state in ``path.state``."""
        path = Path(path)
        rnn.save_checkpoint(path, self.net)
        state = {
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "slots": self.slots,
            "total_steps": self.total_steps,
            "updates": self.updates,
            "episodes": self.episodes,
            "curiosity": None if self.curiosity is None else self.curiosity.state_dict(),
            "curiosity_opt": None if self.curiosity_opt is None else self.curiosity_opt.state_dict(),
        }
        rnn.atomic_write(path.with_suffix(path.suffix + ".state"), pickle.dumps(state))
        return path

    @classmethod
    def resume(cls, path: str | Path, config: PpoConfig) -> "PpoTrainer":
        path = Path(path)
        net = rnn.load_checkpoint(path)
        state = pickle.loads(path.with_suffix(path.suffix + ".state").read_bytes())
        self = cls.__new__(cls)
        torch.set_num_threads(1)
        self.config = config
        self.net = net
        self.optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate,
                                          betas=config.adam_betas, eps=config.adam_eps)
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = state["rng"]
        self.slots = state["slots"]
        self.total_steps = state["total_steps"]
        self.updates = state["updates"]
        self.episodes = state["episodes"]
        self._transitions = []
        self.curiosity = self.curiosity_opt = None
        if state["curiosity"] is not None:
            cfg = net.config
            obs_dim = cfg.vector_dim + (cfg.visual_size ** 2 if cfg.visual else 0)
            self.curiosity = CuriosityModel(obs_dim, cfg.n_continuous + len(cfg.branches),
                                            config.curiosity_encoding, config.seed)
            self.curiosity.load_state_dict(state["curiosity"])
            self.curiosity_opt = torch.optim.Adam(self.curiosity.forward_model.parameters(),
                                                  lr=config.curiosity_learning_rate)
            self.curiosity_opt.load_state_dict(state["curiosity_opt"])
        return self
