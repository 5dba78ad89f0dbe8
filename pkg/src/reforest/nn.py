"""Policy/value network: residual visual encoder, shared MLP trunk, mixed action heads.

Continuous actions use a clipped Gaussian: the sample is clamped to [-1, 1]
for the environment but its log-density is taken before clamping.

Checkpoint layout (all little-endian)::

    0   4  magic  b"RFCK"
    4   4  uint32 format version
    8  32  sha256 of the network config JSON
    40  8  uint64 parameter count N
    48 4N  float32 parameters, concatenated in ``named_parameters`` order
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

CHECKPOINT_MAGIC = b"RFCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sI32sQ")
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    vector_dim: int = 42
    visual: bool = True
    visual_size: int = 16
    channels: tuple[int, ...] = (16, 32, 32)
    hidden_units: int = 128
    num_layers: int = 2
    n_continuous: int = 3
    branches: tuple[int, ...] = (2, 2)
    policy_head_scale: float = 0.01

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        data = dict(data)
        for key in ("channels", "branches"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass
class PolicyOutput:
    means: torch.Tensor
    log_stds: torch.Tensor
    branch_logits: list
    value: torch.Tensor


@dataclass
class ActionSample:
    continuous: np.ndarray
    raw_continuous: np.ndarray
    discrete: np.ndarray
    log_prob: np.ndarray
    entropy: np.ndarray

    def env_actions(self) -> np.ndarray:
        return np.concatenate([self.continuous, self.discrete.astype(np.float64)], axis=-1)


def _lecun_uniform_(layer: nn.Module, gen: torch.Generator, scale: float = 1.0) -> None:
    fan_in = layer.weight[0].numel()
    bound = scale * math.sqrt(3.0 / fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv0 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        out = self.conv0(torch.relu(x))
        out = self.conv1(torch.relu(out))
        return x + out


class ConvStack(nn.Module):
    """conv 3x3 -> 2x2 max-pool -> two residual blocks."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.res0 = ResidualBlock(out_channels)
        self.res1 = ResidualBlock(out_channels)

    def forward(self, x):
        return self.res1(self.res0(self.pool(self.conv(x))))


class VisualEncoder(nn.Module):
    def __init__(self, size: int = 16, channels=(16, 32, 32)):
        super().__init__()
        stacks = []
        in_ch = 1
        for ch in channels:
            stacks.append(ConvStack(in_ch, ch))
            in_ch = ch
            size //= 2
        self.stacks = nn.Sequential(*stacks)
        self.out_dim = in_ch * size * size

    def forward(self, x):
        return torch.relu(self.stacks(x)).flatten(1)


class PolicyNet(nn.Module):
    def __init__(self, config: NetworkConfig = NetworkConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        # torch's default layer init draws from the global RNG; fork it so
        # building a network has no side effects (weights are reset below)
        with torch.random.fork_rng(devices=[]):
            self.encoder = VisualEncoder(config.visual_size, config.channels) if config.visual else None
            in_dim = config.vector_dim + (self.encoder.out_dim if self.encoder is not None else 0)
            layers = []
            for _ in range(config.num_layers):
                layers.append(nn.Linear(in_dim, config.hidden_units))
                in_dim = config.hidden_units
            self.trunk = nn.ModuleList(layers)
            self.mean_head = nn.Linear(in_dim, config.n_continuous)
            self.log_std = nn.Parameter(torch.zeros(config.n_continuous))
            self.branch_heads = nn.ModuleList(nn.Linear(in_dim, k) for k in config.branches)
            self.value_head = nn.Linear(in_dim, 1)
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                _lecun_uniform_(module, gen)
        _lecun_uniform_(self.mean_head, gen, config.policy_head_scale)
        for head in self.branch_heads:
            _lecun_uniform_(head, gen, config.policy_head_scale)

    def forward(self, vector: torch.Tensor, visual: Optional[torch.Tensor] = None) -> PolicyOutput:
        cfg = self.config
        if vector.ndim != 2 or vector.shape[1] != cfg.vector_dim:
            raise ShapeMismatch(f"vector obs must be (B, {cfg.vector_dim}), got {tuple(vector.shape)}")
        x = vector
        if self.encoder is not None:
            if visual is None or tuple(visual.shape[1:]) != (cfg.visual_size, cfg.visual_size) \
                    or visual.shape[0] != vector.shape[0]:
                shape = None if visual is None else tuple(visual.shape)
                raise ShapeMismatch(f"visual obs must be (B, {cfg.visual_size}, {cfg.visual_size}), got {shape}")
            x = torch.cat([self.encoder(visual.unsqueeze(1)), vector], dim=1)
        for layer in self.trunk:
            x = torch.tanh(layer(x))
        return PolicyOutput(
            means=self.mean_head(x),
            log_stds=self.log_std.expand(x.shape[0], -1),
            branch_logits=[head(x) for head in self.branch_heads],
            value=self.value_head(x).squeeze(-1),
        )

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def forward(net: PolicyNet, vector, visual=None) -> PolicyOutput:
    """Run the network on numpy or torch inputs (batched)."""
    dtype = next(net.parameters()).dtype
    vec = torch.as_tensor(np.asarray(vector) if not torch.is_tensor(vector) else vector, dtype=dtype)
    vis = None
    if visual is not None:
        vis = torch.as_tensor(np.asarray(visual) if not torch.is_tensor(visual) else visual, dtype=dtype)
    return net(vec, vis)


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


def log_prob(out: PolicyOutput, raw_continuous: torch.Tensor, discrete: torch.Tensor) -> torch.Tensor:
    std = out.log_stds.exp()
    z = (raw_continuous - out.means) / std
    lp = (-0.5 * z * z - out.log_stds - _LOG_SQRT_2PI).sum(-1)
    for b, logits in enumerate(out.branch_logits):
        lp = lp + torch.log_softmax(logits, -1).gather(-1, discrete[:, b:b + 1].long()).squeeze(-1)
    return lp


def entropy(out: PolicyOutput) -> torch.Tensor:
    ent = (0.5 + _LOG_SQRT_2PI + out.log_stds).sum(-1)
    for logits in out.branch_logits:
        logp = torch.log_softmax(logits, -1)
        ent = ent - (logp.exp() * logp).sum(-1)
    return ent


def branch_probs(out: PolicyOutput) -> list[np.ndarray]:
    return [torch.softmax(l, -1).detach().cpu().numpy() for l in out.branch_logits]


def sample_action(out: PolicyOutput, rng: np.random.Generator, deterministic: bool = False) -> ActionSample:
    """Draw continuous and discrete actions with numpy randomness.

    ``deterministic`` takes the Gaussian means and branch argmaxes.
    """
    with torch.no_grad():
        means = out.means.detach()
        batch = means.shape[0]
        if deterministic:
            raw = means.clone()
            disc = torch.stack([l.argmax(-1) for l in out.branch_logits], dim=1)
        else:
            noise = torch.as_tensor(rng.standard_normal(tuple(means.shape)), dtype=means.dtype)
            raw = means + out.log_stds.exp() * noise
            cols = []
            for probs in branch_probs(out):
                u = rng.random(batch)
                cdf = np.cumsum(probs.astype(np.float64), axis=1)
                cols.append(np.minimum((u[:, None] >= cdf).sum(1), probs.shape[1] - 1))
            disc = torch.as_tensor(np.stack(cols, axis=1))
        lp = log_prob(out, raw, disc)
        ent = entropy(out)
    raw_np = raw.cpu().numpy().astype(np.float64)
    return ActionSample(
        continuous=np.clip(raw_np, -1.0, 1.0),
        raw_continuous=raw_np,
        discrete=disc.cpu().numpy().astype(np.int64),
        log_prob=lp.cpu().numpy().astype(np.float64),
        entropy=ent.cpu().numpy().astype(np.float64),
    )


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def backward(loss: torch.Tensor, params) -> list[torch.Tensor]:
    """Gradients of ``loss`` for every tensor in ``params`` (zeros where unused)."""
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, out):
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter of shape {tuple(p.shape)}")
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def flat_parameters(net: nn.Module) -> np.ndarray:
    return np.concatenate([p.detach().cpu().numpy().astype("<f4").ravel() for p in net.parameters()])


def encode_checkpoint(net: PolicyNet) -> bytes:
    flat = flat_parameters(net)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.config.digest(), flat.size)
    return header + flat.astype("<f4").tobytes()


def atomic_write(path: str | Path, data: bytes) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def save_checkpoint(path: str | Path, net: PolicyNet) -> Path:
    """Write the parameter blob plus a ``.json`` sidecar holding the config."""
    path = Path(path)
    atomic_write(path.with_suffix(path.suffix + ".json"),
                 json.dumps({"network": json.loads(net.config.to_json()),
                             "config_hash": net.config.digest().hex()}, indent=2).encode())
    return atomic_write(path, encode_checkpoint(net))


def read_checkpoint(path: str | Path) -> tuple[bytes, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, digest, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(data) != _HEADER.size + 4 * count:
        raise CheckpointError(f"{path}: expected {count} parameters")
    return digest, np.frombuffer(data, dtype="<f4", offset=_HEADER.size).copy()


def load_into(net: PolicyNet, path: str | Path) -> PolicyNet:
    digest, flat = read_checkpoint(path)
    if digest != net.config.digest():
        raise CheckpointError(f"{path}: config hash mismatch")
    if flat.size != net.param_count():
        raise CheckpointError(f"{path}: parameter count mismatch")
    offset = 0
    with torch.no_grad():
        for p in net.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(flat[offset:offset + n].reshape(p.shape)).to(p.dtype))
            offset += n
    return net


def load_checkpoint(path: str | Path) -> PolicyNet:
    """Rebuild a network from its blob and sidecar config."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise CheckpointError(f"{path}: missing sidecar {sidecar.name}")
    meta = json.loads(sidecar.read_text())
    config = NetworkConfig.from_dict(meta["network"])
    if meta.get("config_hash") != config.digest().hex():
        raise CheckpointError(f"{sidecar}: config hash mismatch")
    return load_into(PolicyNet(config), path)
