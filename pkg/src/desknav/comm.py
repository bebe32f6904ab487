"""Handshake communication with per-agent private memory.

One round at step ``t``:

1. request  - every agent builds (query, key, value); queries are broadcast.
2. match    - every agent scores each received query against its key history
              (temporal softmax inside the history, mean logit across it).
3. select   - the requester normalizes the agent-level logits with a softmax,
              zeroes every score ``<= 1/N`` and, if its own score survives,
              collects the temporally mixed values of surviving supporters.
4. store    - (memory mode) the agent appends its (key, value) to its memory.

Vanilla mode skips memory: only the current key/value take part and the
query sees a zero pooled-memory input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import torch

D_Q = 32
D_K = 32
D_V = 256


class CommMode(str, Enum):
    NONE = "none"
    VANILLA = "vanilla"
    MEMORY = "memory"


@dataclass(frozen=True, eq=False)
class Query:
    vector: torch.Tensor
    sender: int
    step: int


@dataclass(frozen=True, eq=False)
class Key:
    vector: torch.Tensor
    owner: int
    step: int


@dataclass(frozen=True, eq=False)
class ValueMsg:
    vector: torch.Tensor
    owner: int
    step: int


@dataclass(eq=False)
class CommMemory:
    owner: int
    entries: list[tuple[Key, ValueMsg]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last_step(self) -> int | None:
        return self.entries[-1][0].step if self.entries else None

    def keys(self) -> list[torch.Tensor]:
        return [k.vector for k, _ in self.entries]

    def values(self) -> list[torch.Tensor]:
        return [v.vector for _, v in self.entries]

    def pooled_value(self, d_v: int, dtype=torch.float64) -> torch.Tensor:
        """Average of stored values; zero vector for an empty memory."""
        if not self.entries:
            return torch.zeros(d_v, dtype=dtype)
        return torch.stack(self.values()).mean(dim=0)

    def clear(self) -> None:
        self.entries.clear()


@dataclass(eq=False)
class AggregatedMessage:
    vector: torch.Tensor
    contributing: list[tuple[int, float]]
    communicated: bool


@dataclass
class CommLog:
    """Per-step bandwidth ledger for one episode."""

    d_q: int = D_Q
    d_v: int = D_V
    steps: list[dict] = field(default_factory=list)

    def record(self, t: int, per_requester: list[dict]) -> dict:
        entry = {
            "t": t,
            "queries_sent": sum(r["queries_sent"] for r in per_requester),
            "values_sent": sum(r["values_received"] for r in per_requester),
            "scalars_transmitted": sum(r["scalars"] for r in per_requester),
            "per_requester": per_requester,
        }
        self.steps.append(entry)
        return entry

    @property
    def total_scalars(self) -> int:
        return sum(s["scalars_transmitted"] for s in self.steps)

    def to_json(self) -> list[dict]:
        return self.steps


def make_qkv(obs_encoding: torch.Tensor, map_digest: torch.Tensor, memory: CommMemory | None, params,
             step: int = 0, owner: int = 0, use_memory: bool = True) -> tuple[Query, Key, ValueMsg]:
    """Affine query/key/value heads over ``[encoding, digest]``.

    The query additionally reads the mean of the stored values (zero when the
    memory is empty or unused). ``params`` exposes ``query``, ``key`` and
    ``value`` linear layers.
    """
    x = torch.cat([obs_encoding, map_digest])
    d_v = params.value.out_features
    if x.shape[0] != params.key.in_features:
        raise ValueError(f"encoder input has {x.shape[0]} entries, heads expect {params.key.in_features}")
    pooled = memory.pooled_value(d_v, x.dtype) if (use_memory and memory is not None) else x.new_zeros(d_v)
    q_vec = params.query(torch.cat([x, pooled]))
    k_vec = params.key(x)
    v_vec = params.value(x)
    return Query(q_vec, owner, step), Key(k_vec, owner, step), ValueMsg(v_vec, owner, step)


def softmax(x: torch.Tensor) -> torch.Tensor:
    e = torch.exp(x - x.max())
    return e / e.sum()


def match_scores(query: torch.Tensor, keys: torch.Tensor | Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Agent-level logit and temporal weights of one supporter's key history.

    ``keys`` is (t, d_k), oldest first. Per-time logits are scaled dot
    products; the weights are their softmax and the agent-level logit is
    their mean.
    """
    if not isinstance(keys, torch.Tensor):
        if len(keys) == 0:
            raise ValueError("no keys to match against")
        keys = torch.stack(list(keys))
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("no keys to match against")
    logits = keys @ query / math.sqrt(keys.shape[1])
    return logits.mean(), softmax(logits)


def apply_cross_agent_softmax(agent_logits: torch.Tensor, self_index: int) -> torch.Tensor:
    """Scores of every agent (self included) for one requester; sums to one."""
    if not 0 <= self_index < agent_logits.shape[0]:
        raise IndexError("self_index out of range")
    return softmax(agent_logits)


def gate(s, threshold: float):
    """Zero a score at or below the threshold, pass it unchanged otherwise."""
    if isinstance(s, torch.Tensor):
        return torch.where(s > threshold, s, torch.zeros_like(s))
    return s if s > threshold else 0.0


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def aggregate(self_pair: tuple, supporter_pairs: list[tuple], threshold: float, self_id: int = 0,
              supporter_ids: list[int] | None = None) -> AggregatedMessage:
    """Gated weighted sum of the requester's own mixed value and its supporters'."""
    s_self, v_self = self_pair
    g_self = float(gate(_scalar(s_self), threshold))
    if g_self == 0.0:
        return AggregatedMessage(torch.zeros_like(v_self), [], False)
    ids = supporter_ids if supporter_ids is not None else list(range(1, len(supporter_pairs) + 1))
    out = g_self * v_self
    contributing = [(self_id, g_self)]
    for m, (s, v) in zip(ids, supporter_pairs):
        if v.shape != v_self.shape:
            raise ValueError("value dimension mismatch")
        g = float(gate(_scalar(s), threshold))
        if g > 0.0:
            out = out + g * v
            contributing.append((m, g))
    return AggregatedMessage(out, contributing, True)


def store(memory: CommMemory, key: Key, value: ValueMsg) -> CommMemory:
    if key.step != value.step:
        raise ValueError("key and value belong to different steps")
    if memory.last_step is not None and key.step <= memory.last_step:
        raise ValueError(f"step {key.step} is not after the last stored step {memory.last_step}")
    memory.entries.append((key, value))
    return memory


@dataclass(eq=False)
class RoundResult:
    messages: list[AggregatedMessage]
    log_entry: dict
    # per requester, ordered by supporter id: agent-level logits and mixed values
    supporter_logits: list[torch.Tensor]
    supporter_values: list[torch.Tensor]
    self_logits: list[torch.Tensor]
    scores: list[torch.Tensor]
    keys: list[Key]
    values: list[ValueMsg]


def run_round(mode: CommMode | str, encodings: Sequence[torch.Tensor], digests: Sequence[torch.Tensor],
              memories: Sequence[CommMemory], params, t: int, log: CommLog | None = None) -> RoundResult:
    """One synchronous request/match/select(/store) round for a team."""
    mode = CommMode(mode)
    n = len(encodings)
    d_q = params.query.out_features
    d_v = params.value.out_features
    dtype = encodings[0].dtype
    if mode is CommMode.NONE or n == 1:
        # solo agents and the no-communication baseline bypass the channel
        zeros = [AggregatedMessage(torch.zeros(d_v, dtype=dtype), [], False) for _ in range(n)]
        per = [{"agent": i, "communicated": False, "supporters": [], "queries_sent": 0,
                "values_received": 0, "scalars": 0} for i in range(n)]
        entry = log.record(t, per) if log is not None else {"t": t, "per_requester": per, "scalars_transmitted": 0}
        empty = torch.zeros(0, dtype=dtype)
        return RoundResult(zeros, entry, [empty] * n, [torch.zeros(0, d_v, dtype=dtype)] * n,
                           [empty] * n, [torch.ones(1, dtype=dtype)] * n, [], [])

    use_mem = mode is CommMode.MEMORY
    qkv = [make_qkv(encodings[i], digests[i], memories[i], params, step=t, owner=i, use_memory=use_mem)
           for i in range(n)]
    key_hist, val_hist = [], []
    for i in range(n):
        ks = (memories[i].keys() if use_mem else []) + [qkv[i][1].vector]
        vs = (memories[i].values() if use_mem else []) + [qkv[i][2].vector]
        key_hist.append(torch.stack(ks))
        val_hist.append(torch.stack(vs))

    threshold = 1.0 / n
    messages, per = [], []
    sup_logits, sup_values, self_logits, all_scores = [], [], [], []
    for r in range(n):
        q_vec = qkv[r][0].vector
        logits, mixed = [], []
        for m in range(n):
            lm, w = match_scores(q_vec, key_hist[m])
            logits.append(lm)
            mixed.append(w @ val_hist[m])
        logits_t = torch.stack(logits)
        s = apply_cross_agent_softmax(logits_t, r)
        others = [m for m in range(n) if m != r]
        msg = aggregate((s[r], mixed[r]), [(s[m], mixed[m]) for m in others], threshold,
                        self_id=r, supporter_ids=others)
        messages.append(msg)
        sent = [m for m, _ in msg.contributing if m != r]
        per.append({
            "agent": r,
            "communicated": msg.communicated,
            "supporters": sent,
            "queries_sent": n - 1,
            "values_received": len(sent),
            "scalars": (n - 1) * d_q + len(sent) * d_v,
            "threshold": threshold,
        })
        sup_logits.append(logits_t[others])
        sup_values.append(torch.stack([mixed[m] for m in others]))
        self_logits.append(logits_t[r])
        all_scores.append(s)

    if use_mem:
        for i in range(n):
            store(memories[i], qkv[i][1], qkv[i][2])
    entry = log.record(t, per) if log is not None else {
        "t": t, "per_requester": per, "scalars_transmitted": sum(p["scalars"] for p in per)}
    return RoundResult(messages, entry, sup_logits, sup_values, self_logits, all_scores,
                       [q[1] for q in qkv], [q[2] for q in qkv])
