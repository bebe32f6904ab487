"""Shared actor-critic used by every agent of a team.

Per step an agent encodes its observation, goal signature and map digest,
exchanges messages (see ``comm``), then a GRU cell reads
``[embedding, compressed message]``. The action head is a tanh-squashed
Gaussian; the value head reads the same GRU output.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .comm import D_Q, D_V, AggregatedMessage
from .mapping import SUMMARY_SIZE
from .scene import N_RAYS
from .sim import Action, Observation

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_MAGIC = b"DNAVCKPT"


@dataclass(frozen=True)
class ArchConfig:
    n_rays: int = N_RAYS
    digest_dim: int = SUMMARY_SIZE
    emb_dim: int = 64
    hidden_dim: int = 64
    d_q: int = D_Q
    d_v: int = D_V
    msg_dim: int = 64
    log_std_init: float = -0.5

    @property
    def obs_dim(self) -> int:
        return 4 * self.n_rays + 3

    @property
    def encoder_in(self) -> int:
        return self.obs_dim + self.n_rays + self.digest_dim


@dataclass
class RecurrentState:
    hidden: torch.Tensor

    @classmethod
    def zeros(cls, arch: ArchConfig, batch: int | None = None) -> "RecurrentState":
        shape = (arch.hidden_dim,) if batch is None else (batch, arch.hidden_dim)
        return cls(torch.zeros(shape, dtype=torch.float64))


@dataclass
class PolicyOutput:
    mean: torch.Tensor
    log_std: torch.Tensor
    value: torch.Tensor
    new_hidden: torch.Tensor
    pre_squash: torch.Tensor | None = None
    log_prob: torch.Tensor | None = None


class QKVHeads(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        comm_in = arch.emb_dim + arch.digest_dim
        self.query = nn.Linear(comm_in + arch.d_v, arch.d_q)
        self.key = nn.Linear(comm_in, arch.d_q)
        self.value = nn.Linear(comm_in, arch.d_v)


class NavPolicy(nn.Module):
    def __init__(self, arch: ArchConfig | None = None, seed: int = 0):
        super().__init__()
        self.arch = arch = arch or ArchConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.encoder = nn.Linear(arch.encoder_in, arch.emb_dim)
        self.heads = QKVHeads(arch)
        self.msg = nn.Linear(arch.d_v, arch.msg_dim)
        self.core = nn.GRUCell(arch.emb_dim + arch.msg_dim, arch.hidden_dim)
        self.actor = nn.Linear(arch.hidden_dim, 2)
        self.critic = nn.Linear(arch.hidden_dim, 1)
        self.log_std = nn.Parameter(torch.full((2,), arch.log_std_init))
        with torch.no_grad():
            self.actor.weight.mul_(0.01)
            self.actor.bias.zero_()
        torch.random.set_rng_state(gen_state)
        self.double()
        self.version = 0

    # -- building blocks -------------------------------------------------------

    def encode(self, obs_features: torch.Tensor, map_digest: torch.Tensor, goal: torch.Tensor) -> torch.Tensor:
        x = torch.cat([obs_features, goal, map_digest], dim=-1)
        if x.shape[-1] != self.arch.encoder_in:
            raise ValueError(f"encoder expects {self.arch.encoder_in} inputs, got {x.shape[-1]}")
        return torch.tanh(self.encoder(x))

    def core_step(self, embedding: torch.Tensor, message: torch.Tensor, hidden: torch.Tensor):
        if message.shape[-1] != self.arch.d_v:
            raise ValueError(f"message must have {self.arch.d_v} entries")
        h = self.core(torch.cat([embedding, torch.tanh(self.msg(message))], dim=-1), hidden)
        mean = self.actor(h)
        value = self.critic(h).squeeze(-1)
        log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, value, h

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"non-finite parameter {name}")


# -- distribution helpers -------------------------------------------------------

def tanh_log_det(u: torch.Tensor) -> torch.Tensor:
    """log(1 - tanh(u)^2), computed stably."""
    return 2.0 * (math.log(2.0) - u - nn.functional.softplus(-2.0 * u))


def squashed_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """Log-density of ``tanh(u)`` where ``u ~ N(mean, exp(log_std)^2)``."""
    z = (u - mean) / torch.exp(log_std)
    gauss = -0.5 * z * z - log_std - 0.5 * math.log(2.0 * math.pi)
    return (gauss - tanh_log_det(u)).sum(-1)


def gaussian_entropy(log_std: torch.Tensor) -> torch.Tensor:
    """Entropy of the pre-squash Gaussian (the squashed one has no closed form)."""
    return (log_std + 0.5 * math.log(2.0 * math.pi * math.e)).sum(-1)


def encode(policy: NavPolicy, obs: Observation, map_digest, goal=None) -> torch.Tensor:
    feats = torch.as_tensor(obs.features())
    g = obs.goal_signature.vector if goal is None else getattr(goal, "vector", goal)
    return policy.encode(feats, torch.as_tensor(np.asarray(map_digest, dtype=float)), torch.as_tensor(np.asarray(g, dtype=float)))


def act(policy: NavPolicy, embedding: torch.Tensor, message: AggregatedMessage | torch.Tensor,
        hidden: RecurrentState, mode: str = "sample", rng: np.random.Generator | None = None
        ) -> tuple[Action, PolicyOutput]:
    """One decision for one agent.

    ``sample`` draws ``u ~ N(mean, std)`` with ``rng`` and emits ``tanh(u)``;
    ``deterministic`` emits ``tanh(mean)``.
    """
    policy.check_finite()
    msg = message.vector if isinstance(message, AggregatedMessage) else message
    with torch.no_grad():
        mean, log_std, value, h = policy.core_step(embedding, msg, hidden.hidden)
        if mode == "deterministic":
            u = mean
        elif mode == "sample":
            if rng is None:
                raise ValueError("sampling needs an rng")
            u = mean + torch.exp(log_std) * torch.as_tensor(rng.standard_normal(2))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        logp = squashed_log_prob(u, mean, log_std)
    a = torch.tanh(u)
    return Action(float(a[0]), float(a[1])), PolicyOutput(mean, log_std, value, h, u, logp)


# -- flat parameter view ----------------------------------------------------------

@dataclass
class ParamSet:
    values: torch.Tensor
    layout: list[tuple[str, tuple[int, ...], int]]
    version: int = 0

    @classmethod
    def from_policy(cls, policy: NavPolicy) -> "ParamSet":
        layout, offset = [], 0
        for name, p in policy.named_parameters():
            layout.append((name, tuple(p.shape), offset))
            offset += p.numel()
        flat = nn.utils.parameters_to_vector(policy.parameters()).detach().clone()
        return cls(flat, layout, policy.version)

    def load_into(self, policy: NavPolicy) -> None:
        nn.utils.vector_to_parameters(self.values.clone(), policy.parameters())
        policy.version = self.version

    @property
    def size(self) -> int:
        return int(self.values.numel())


def param_count(arch: ArchConfig) -> int:
    return sum(p.numel() for p in NavPolicy(arch).parameters())


def gradients(policy: NavPolicy, loss_fn: Callable[[], torch.Tensor]) -> torch.Tensor:
    """Flat gradient of ``loss_fn()`` with respect to every policy parameter."""
    params = list(policy.parameters())
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    if not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in params))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)])
    if not torch.isfinite(flat).all():
        raise FloatingPointError("non-finite gradient")
    return flat


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, policy: NavPolicy, extra: dict | None = None) -> None:
    """Binary blob: magic, header length, JSON header, little-endian float64 values."""
    ps = ParamSet.from_policy(policy)
    header = {
        "arch": asdict(policy.arch),
        "version": policy.version,
        "layout": [[n, list(s), o] for n, s, o in ps.layout],
        "n_values": ps.size,
    }
    header.update(extra or {})
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(ps.values.numpy().astype("<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path, arch: ArchConfig | None = None) -> tuple[NavPolicy, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        blob = fh.read()
    saved = ArchConfig(**header["arch"])
    if arch is not None and arch != saved:
        raise ValueError(f"checkpoint architecture {saved} does not match {arch}")
    policy = NavPolicy(saved)
    values = torch.from_numpy(np.frombuffer(blob, dtype="<f8").copy())
    ps = ParamSet.from_policy(policy)
    if values.numel() != ps.size:
        raise ValueError("checkpoint size does not match its architecture")
    ps.values = values
    ps.version = header.get("version", 0)
    ps.load_into(policy)
    return policy, header
