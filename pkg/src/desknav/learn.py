"""Decentralized clipped PPO over team rollouts, plus a behaviour-cloning baseline.

Each agent's episode is one training sequence. During updates the agent's own
query/key/value heads are re-run along the sequence, while everything the
other agents sent back (their match logits and mixed values) is replayed
from the rollout as fixed input. With unchanged parameters this rebuilds the
exact messages the agent acted on.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .baselines import oracle_controller
from .comm import CommMode
from .dataset import Split
from .metrics import compute_metrics
from .policy import NavPolicy, gaussian_entropy, save_checkpoint, squashed_log_prob
from .rollout import AgentSequence, compute_reward, run_policy_episodes

__all__ = [
    "Method", "TrainConfig", "Transition", "RolloutBuffer", "compute_reward", "compute_gae",
    "SequenceBatch", "build_batch", "sequence_forward", "ppo_loss", "ppo_update", "train_run",
    "bc_train", "evaluate_probe",
]


class Method(str, Enum):
    IPPO_NO_COM = "ippo_no_com"
    VANILLA_COM = "vanilla_com"
    MEMORY_COM = "memory_com"

    @property
    def comm_mode(self) -> CommMode:
        return {Method.IPPO_NO_COM: CommMode.NONE, Method.VANILLA_COM: CommMode.VANILLA,
                Method.MEMORY_COM: CommMode.MEMORY}[self]

    @classmethod
    def parse(cls, name: str) -> "Method":
        aliases = {"ippo": cls.IPPO_NO_COM, "vanilla": cls.VANILLA_COM, "memory": cls.MEMORY_COM}
        return aliases.get(name, None) or cls(name)


@dataclass
class TrainConfig:
    lr: float = 1e-5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.001
    value_coef: float = 0.5
    ppo_epochs: int = 8
    minibatches: int = 5
    parallel_envs: int = 8
    optimizer: str = "adam"
    # run control
    updates: int = 50
    seed: int = 0
    horizon: int = 80
    max_grad_norm: float = 0.5
    probe_every: int = 10
    probe_episodes: int = 30
    time_budget_s: float = 0.0  # 0 disables the wall-clock stop

    def __post_init__(self):
        for f in ("lr", "gamma", "gae_lambda", "clip_eps", "entropy_coef", "value_coef", "max_grad_norm"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        for f in ("ppo_epochs", "minibatches", "parallel_envs", "horizon", "probe_every", "probe_episodes"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.updates < 0:
            raise ValueError("updates must be >= 0")
        if self.optimizer.lower() != "adam":
            raise ValueError("only the adam optimizer is supported")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Transition:
    """One agent's step as seen by the learner."""

    inputs: np.ndarray
    message: np.ndarray
    pre_squash: np.ndarray
    log_prob: float
    value: float
    reward: float
    done: bool
    collided: bool
    delta_geodesic: float


@dataclass
class RolloutBuffer:
    sequences: list[AgentSequence] = field(default_factory=list)
    horizon: int = 80
    seed: int = 0

    def add(self, seqs) -> None:
        self.sequences.extend(seqs)

    @property
    def n_steps(self) -> int:
        return sum(len(q) for q in self.sequences)

    @property
    def complete(self) -> bool:
        return bool(self.sequences) and all(q.complete for q in self.sequences)

    def transitions(self, k: int) -> list[Transition]:
        q = self.sequences[k]
        return [Transition(q.inputs[t], q.messages[t], q.pre_squash[t], q.log_probs[t], q.values[t],
                           q.rewards[t], q.dones[t], q.collided[t], q.deltas[t]) for t in range(len(q))]

    def clear(self) -> None:
        self.sequences = []


def compute_gae(rewards, values, dones, gamma: float, lam: float, bootstrap: float = 0.0):
    """Generalized advantage estimates and returns for one trajectory.

    ``values[t]`` is V(s_t); ``bootstrap`` is V(s_T) after the last step and
    is ignored when the last step is terminal.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if not (r.shape == v.shape == d.shape) or r.ndim != 1:
        raise ValueError("rewards, values and dones must be 1-d arrays of equal length")
    adv = np.zeros_like(r)
    last = 0.0
    for t in range(len(r) - 1, -1, -1):
        nxt = bootstrap if t == len(r) - 1 else v[t + 1]
        delta = r[t] + gamma * nxt * (1.0 - d[t]) - v[t]
        last = delta + gamma * lam * (1.0 - d[t]) * last
        adv[t] = last
    return adv, adv + v


# -- sequence replay -----------------------------------------------------------

@dataclass(eq=False)
class SequenceBatch:
    inputs: torch.Tensor       # (B, L, encoder_in)
    sup_logits: torch.Tensor   # (B, L, N-1)
    sup_values: torch.Tensor   # (B, L, N-1, d_v)
    others: torch.Tensor       # (B, N-1) agent ids of the supporters
    self_index: torch.Tensor   # (B,)
    pre_squash: torch.Tensor   # (B, L, 2)
    old_log_prob: torch.Tensor
    old_value: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor
    mask: torch.Tensor         # (B, L) 1 on real steps
    messages: torch.Tensor     # (B, L, d_v) as acted on
    n_agents: int
    mode: CommMode

    def select(self, idx) -> "SequenceBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        parts = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in parts.items():
            if isinstance(v, torch.Tensor):
                parts[k] = v[idx]
        return SequenceBatch(**parts)


def build_batch(seqs: list[AgentSequence], d_v: int, advantages=None, returns=None) -> SequenceBatch:
    if not seqs:
        raise ValueError("no sequences")
    n = seqs[0].n_agents
    mode = CommMode(seqs[0].mode)
    if any(q.n_agents != n or q.mode != mode.value for q in seqs):
        raise ValueError("a batch must share team size and communication mode")
    b, length = len(seqs), max(len(q) for q in seqs)
    width = len(seqs[0].inputs[0])
    x = np.zeros((b, length, width))
    sl = np.zeros((b, length, max(n - 1, 0)))
    sv = np.zeros((b, length, max(n - 1, 0), d_v))
    u = np.zeros((b, length, 2))
    lp = np.zeros((b, length))
    val = np.zeros((b, length))
    msg = np.zeros((b, length, d_v))
    mask = np.zeros((b, length))
    adv = np.zeros((b, length))
    ret = np.zeros((b, length))
    for k, q in enumerate(seqs):
        t = len(q)
        x[k, :t] = np.stack(q.inputs)
        if n > 1 and mode is not CommMode.NONE:
            sl[k, :t] = np.stack(q.sup_logits)
            sv[k, :t] = np.stack(q.sup_values)
        u[k, :t] = np.stack(q.pre_squash)
        lp[k, :t] = q.log_probs
        val[k, :t] = q.values
        msg[k, :t] = np.stack(q.messages)
        mask[k, :t] = 1.0
        if advantages is not None:
            adv[k, :t] = advantages[k]
            ret[k, :t] = returns[k]
    others = np.array([[m for m in range(n) if m != q.self_index] for q in seqs], dtype=np.int64).reshape(b, n - 1)
    t = torch.as_tensor
    return SequenceBatch(t(x), t(sl), t(sv), t(others), t(np.array([q.self_index for q in seqs])), t(u), t(lp),
                         t(val), t(adv), t(ret), t(mask), t(msg), n, mode)


def own_messages(policy: NavPolicy, emb: torch.Tensor, digest: torch.Tensor, batch: SequenceBatch) -> torch.Tensor:
    """Rebuild each step's aggregated message with live own heads."""
    b, length = emb.shape[:2]
    heads = policy.heads
    d_v = heads.value.out_features
    n = batch.n_agents
    if batch.mode is CommMode.NONE or n == 1:
        return emb.new_zeros(b, length, d_v)
    c = torch.cat([emb, digest], dim=-1)
    keys = heads.key(c)
    vals = heads.value(c)
    scale = math.sqrt(keys.shape[-1])
    if batch.mode is CommMode.MEMORY:
        csum = torch.cumsum(vals, dim=1)
        prev = torch.cat([vals.new_zeros(b, 1, d_v), csum[:, :-1]], dim=1)
        count = torch.arange(length, dtype=vals.dtype).clamp(min=1.0)
        pooled = prev / count[None, :, None]
        q = heads.query(torch.cat([c, pooled], dim=-1))
        scores = q @ keys.transpose(1, 2) / scale  # [b, t, s] = q_t . k_s
        causal = torch.tril(torch.ones(length, length, dtype=torch.bool))
        w = torch.softmax(scores.masked_fill(~causal, -math.inf), dim=-1)
        mixed_self = w @ vals
        self_logit = scores.masked_fill(~causal, 0.0).sum(-1) / torch.arange(1, length + 1, dtype=vals.dtype)
    else:
        q = heads.query(torch.cat([c, c.new_zeros(b, length, d_v)], dim=-1))
        self_logit = (q * keys).sum(-1) / scale
        mixed_self = vals
    logits = emb.new_zeros(b, length, n)
    logits = logits.scatter(2, batch.others[:, None, :].expand(b, length, n - 1), batch.sup_logits)
    logits = logits.scatter(2, batch.self_index[:, None, None].expand(b, length, 1), self_logit[..., None])
    s = torch.softmax(logits, dim=-1)
    g = torch.where(s > 1.0 / n, s, torch.zeros_like(s))
    g_self = g.gather(2, batch.self_index[:, None, None].expand(b, length, 1))
    g_sup = g.gather(2, batch.others[:, None, :].expand(b, length, n - 1))
    msg = g_self * mixed_self + (g_sup[..., None] * batch.sup_values).sum(dim=2)
    return torch.where(g_self > 0, msg, torch.zeros_like(msg))


def sequence_forward(policy: NavPolicy, batch: SequenceBatch):
    """Replay sequences from a zero hidden state; returns mean, log_std, value, messages."""
    arch = policy.arch
    emb = torch.tanh(policy.encoder(batch.inputs))
    digest = batch.inputs[..., -arch.digest_dim:]
    msg = own_messages(policy, emb, digest, batch)
    b, length = emb.shape[:2]
    h = emb.new_zeros(b, arch.hidden_dim)
    means, values = [], []
    log_std = None
    for t in range(length):
        mean, log_std, value, h = policy.core_step(emb[:, t], msg[:, t], h)
        means.append(mean)
        values.append(value)
    return torch.stack(means, dim=1), log_std, torch.stack(values, dim=1), msg


def ppo_loss(policy: NavPolicy, batch: SequenceBatch, cfg: TrainConfig):
    """Clipped surrogate, value regression and entropy bonus over real steps."""
    mean, log_std, value, _ = sequence_forward(policy, batch)
    logp = squashed_log_prob(batch.pre_squash, mean, log_std)
    ratio = torch.exp(logp - batch.old_log_prob)
    adv = batch.advantages
    surr = torch.minimum(ratio * adv, torch.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv)
    m = batch.mask
    denom = m.sum()
    policy_obj = (surr * m).sum() / denom
    value_loss = (((value - batch.returns) ** 2) * m).sum() / denom
    entropy = gaussian_entropy(log_std)
    loss = -policy_obj + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    stats = {"policy_loss": -policy_obj.item(), "value_loss": value_loss.item(), "entropy": entropy.item(),
             "ratio_max_dev": ((ratio - 1.0).abs() * m).max().item()}
    return loss, stats


def normalize_advantages(advs: list[np.ndarray]) -> list[np.ndarray]:
    flat = np.concatenate(advs)
    std = flat.std()
    return [(a - flat.mean()) / (std if std > 1e-12 else 1.0) for a in advs]


def ppo_update(policy: NavPolicy, optimizer: torch.optim.Optimizer, buffer: RolloutBuffer, cfg: TrainConfig,
               rng: np.random.Generator) -> dict:
    """One PPO update over whole agent sequences; clears the buffer."""
    if not buffer.complete:
        raise ValueError("rollout buffer is incomplete")
    seqs = buffer.sequences
    advs, rets = [], []
    for q in seqs:
        a, r = compute_gae(q.rewards, q.values, q.dones, cfg.gamma, cfg.gae_lambda)
        advs.append(a)
        rets.append(r)
    advs = normalize_advantages(advs)
    groups: dict[tuple, list[int]] = {}
    for k, q in enumerate(seqs):
        groups.setdefault((q.n_agents, q.mode), []).append(k)
    batches = [build_batch([seqs[k] for k in ks], policy.arch.d_v, [advs[k] for k in ks], [rets[k] for k in ks])
               for ks in groups.values()]
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    steps = 0
    for _ in range(cfg.ppo_epochs):
        for full in batches:
            order = rng.permutation(full.inputs.shape[0])
            for chunk in np.array_split(order, min(cfg.minibatches, len(order))):
                mb = full.select(chunk)
                loss, stats = ppo_loss(policy, mb, cfg)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite PPO loss: {stats}")
                optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
                optimizer.step()
                for k in totals:
                    totals[k] += stats[k]
                steps += 1
    policy.check_finite()
    policy.version += 1
    buffer.clear()
    return {k: v / max(steps, 1) for k, v in totals.items()}


# -- training loops --------------------------------------------------------------

def evaluate_probe(policy: NavPolicy, split: Split, indices, mode: CommMode, horizon: int = 80) -> float:
    results = run_policy_episodes(policy, split.jobs(indices), mode, "deterministic", horizon=horizon,
                                  record=False, indices=list(indices))
    return compute_metrics([r.log for r in results], horizon).overall["SR"]


def probe_indices(split: Split, count: int) -> list[int]:
    """First episodes of each difficulty bin, interleaved so the probe stays stratified."""
    bins: dict[str, list[int]] = {}
    for i, e in enumerate(split.episodes):
        bins.setdefault(e.difficulty, []).append(i)
    out, k = [], 0
    while len(out) < min(count, len(split.episodes)):
        for ids in bins.values():
            if k < len(ids) and len(out) < count:
                out.append(ids[k])
        k += 1
    return sorted(out)


CURVE_COLUMNS = ("update", "episodes", "mean_episode_reward", "train_sr", "val_sr", "policy_loss", "value_loss",
                 "entropy", "comm_scalars")


@dataclass
class TrainResult:
    policy: NavPolicy
    curve: list[dict]
    checkpoint: Path | None
    comm_scalars: int


def _write_curve(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def train_run(method: Method | str, cfg: TrainConfig, train: Split, val: Split | None = None, out_dir=None,
              policy: NavPolicy | None = None, task: str = "CommonGoal", log=None) -> TrainResult:
    """IPPO-style training of one shared policy for the given communication method."""
    method = Method.parse(method) if isinstance(method, str) else method
    mode = method.comm_mode
    torch.set_num_threads(1)
    policy = policy or NavPolicy(seed=cfg.seed)
    optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 17])
    probe = probe_indices(val, cfg.probe_episodes) if val is not None else []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as fh:
            json.dump({"method": method.value, "task": task, **cfg.to_json()}, fh, indent=2, sort_keys=True)
    curve: list[dict] = []
    total_scalars = 0
    episodes = 0
    start = time.perf_counter()
    val_sr = evaluate_probe(policy, val, probe, mode, cfg.horizon) if probe else float("nan")
    curve.append(_row(0, 0, float("nan"), float("nan"), val_sr, {}, 0))
    for u in range(1, cfg.updates + 1):
        picks = rng.integers(len(train.episodes), size=cfg.parallel_envs)
        results = run_policy_episodes(policy, train.jobs(picks), mode, "sample", rng, cfg.horizon,
                                      indices=[int(p) for p in picks])
        buffer = RolloutBuffer(horizon=cfg.horizon, seed=cfg.seed)
        for r in results:
            buffer.add(r.sequences)
            total_scalars += r.comm_scalars
        episodes += len(results)
        n_agent_eps = sum(len(r.log.agents) for r in results)
        mean_reward = sum(r.total_reward for r in results) / n_agent_eps
        train_sr = sum(a.succeeded for r in results for a in r.log.agents) / n_agent_eps
        stats = ppo_update(policy, optimizer, buffer, cfg, rng)
        over_time = cfg.time_budget_s > 0 and time.perf_counter() - start > cfg.time_budget_s
        last = u == cfg.updates or over_time
        if probe and (u % cfg.probe_every == 0 or last):
            val_sr = evaluate_probe(policy, val, probe, mode, cfg.horizon)
        else:
            val_sr = float("nan")
        row = _row(u, episodes, mean_reward, train_sr, val_sr, stats, total_scalars)
        curve.append(row)
        if log is not None:
            log(row)
        if out is not None:
            _write_curve(out / "curve.csv", curve)
        if over_time:
            break
    ckpt = None
    if out is not None:
        _write_curve(out / "curve.csv", curve)
        ckpt = out / "policy.ckpt"
        save_checkpoint(ckpt, policy, {"method": method.value, "task": task, "seed": cfg.seed,
                                       "comm_mode": mode.value})
    return TrainResult(policy, curve, ckpt, total_scalars)


def _row(u, episodes, reward, train_sr, val_sr, stats, scalars) -> dict:
    return {"update": u, "episodes": episodes, "mean_episode_reward": reward, "train_sr": train_sr,
            "val_sr": val_sr, "policy_loss": stats.get("policy_loss", float("nan")),
            "value_loss": stats.get("value_loss", float("nan")), "entropy": stats.get("entropy", float("nan")),
            "comm_scalars": scalars}


def collect_demonstrations(policy: NavPolicy, split: Split, indices, horizon: int = 80) -> list[AgentSequence]:
    """Oracle-driven episodes recorded with the policy's own inputs."""
    results = run_policy_episodes(policy, split.jobs(indices), CommMode.NONE, "deterministic", horizon=horizon,
                                  teacher=oracle_controller, indices=list(indices))
    return [q for r in results for q in r.sequences]


def bc_loss(policy: NavPolicy, batch: SequenceBatch) -> torch.Tensor:
    mean, _, _, _ = sequence_forward(policy, batch)
    err = ((mean - batch.pre_squash) ** 2).sum(-1)
    return (err * batch.mask).sum() / batch.mask.sum()


def bc_train(cfg: TrainConfig, train: Split, out_dir=None, steps: int | None = None, episodes: int = 64,
             lr: float | None = None, policy: NavPolicy | None = None, log=None) -> TrainResult:
    """Regress the pre-squash action mean onto oracle actions (mapped through atanh)."""
    torch.set_num_threads(1)
    policy = policy or NavPolicy(seed=cfg.seed)
    steps = cfg.updates if steps is None else steps
    rng = np.random.default_rng([cfg.seed, 23])
    curve: list[dict] = []
    if steps > 0:
        picks = rng.choice(len(train.episodes), size=min(episodes, len(train.episodes)), replace=False)
        seqs = collect_demonstrations(policy, train, sorted(int(p) for p in picks), cfg.horizon)
        groups: dict[int, list[AgentSequence]] = {}
        for q in seqs:
            groups.setdefault(q.n_agents, []).append(q)
        batches = [build_batch(g, policy.arch.d_v) for g in groups.values()]
        optimizer = torch.optim.Adam(policy.parameters(), lr=lr or cfg.lr)
        for step in range(1, steps + 1):
            total = 0.0
            for full in batches:
                order = rng.permutation(full.inputs.shape[0])
                for chunk in np.array_split(order, min(cfg.minibatches, len(order))):
                    loss = bc_loss(policy, full.select(chunk))
                    optimizer.zero_grad()
                    loss.backward()
                    torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
                    optimizer.step()
                    total += loss.item()
            row = _row(step, len(seqs), float("nan"), float("nan"), float("nan"), {"policy_loss": total}, 0)
            curve.append(row)
            if log is not None:
                log(row)
        policy.version += 1
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_curve(out / "curve.csv", curve)
        ckpt = out / "policy.ckpt"
        save_checkpoint(ckpt, policy, {"method": "il", "seed": cfg.seed, "comm_mode": CommMode.NONE.value})
    return TrainResult(policy, curve, ckpt, 0)
