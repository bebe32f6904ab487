"""Batched team episodes: sensing, mapping, communication and acting.

Several environments advance in lockstep so that the encoder and recurrent
core run once per step over every (environment, agent) pair. Each agent's
decisions are recorded as an :class:`AgentSequence` (the per-agent slice of a
rollout) that the learner replays during updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .comm import CommLog, CommMemory, CommMode, run_round
from .mapping import EgoMap, init_map, map_summary, update_map
from .metrics import TrajectoryLog, TrajectoryRecorder
from .policy import NavPolicy, squashed_log_prob
from .scene import Arena, EpisodeSpec, GeodesicField
from .sim import Action, WorldState, make_world, observe, step

COLLISION_PENALTY = 0.05
TEACHER_CLIP = 0.995


def compute_reward(delta_geodesic: float, collided: bool) -> float:
    return 1.00 * delta_geodesic - COLLISION_PENALTY * float(bool(collided))


@dataclass
class AgentSequence:
    """One agent's decisions over one episode, in step order.

    ``inputs`` are encoder inputs (observation features, goal signature, map
    digest). ``sup_logits``/``sup_values`` hold what the other agents sent
    back at each step, ordered by agent id with ``self_index`` removed.
    """

    self_index: int
    n_agents: int
    mode: str
    inputs: list = field(default_factory=list)
    sup_logits: list = field(default_factory=list)
    sup_values: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    pre_squash: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    collided: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    actions: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def complete(self) -> bool:
        n = len(self.rewards)
        return n > 0 and all(len(getattr(self, k)) == n for k in (
            "inputs", "sup_logits", "sup_values", "messages", "pre_squash", "log_probs", "values", "dones"))


@dataclass
class EpisodeResult:
    log: TrajectoryLog
    sequences: list[AgentSequence]
    total_reward: float
    comm_scalars: int


class _Slot:
    def __init__(self, arena: Arena, episode: EpisodeSpec, fields, mode: CommMode, horizon: int, meta: dict):
        self.world: WorldState = make_world(arena, episode, fields, horizon=horizon)
        n = self.world.n_agents
        self.mode = mode
        self.maps: list[EgoMap] = [init_map() for _ in range(n)]
        self.memories = [CommMemory(i) for i in range(n)]
        self.comm_log = CommLog()
        self.prev_poses = [a.pose for a in self.world.agents]
        self.seqs = [AgentSequence(i, n, mode.value) for i in range(n)]
        self.reward = 0.0
        starts = [(p.x, p.y) for p in self.prev_poses]
        self.recorder = TrajectoryRecorder(meta, starts, [self.world.geodesic(i) for i in range(n)], horizon)
        self.done = False


def episode_meta(episode: EpisodeSpec, index: int | None = None) -> dict:
    return {"arena_id": episode.arena_id, "seed": episode.seed, "difficulty": episode.difficulty,
            "task": str(getattr(episode.task, "value", episode.task)), "n_agents": episode.n_agents,
            "index": index, "starts": [[p.x, p.y] for p in episode.starts],
            "goals": [[g.x, g.y] for g in episode.goals]}


def run_policy_episodes(policy: NavPolicy, jobs: Sequence[tuple[Arena, EpisodeSpec, list[GeodesicField] | None]],
                        mode: CommMode | str, action_mode: str = "sample", rng: np.random.Generator | None = None,
                        horizon: int = 80, record: bool = True, indices: Sequence[int] | None = None,
                        teacher: Callable[[WorldState, int], Action] | None = None) -> list[EpisodeResult]:
    """Play one episode per job with ``policy`` shared by every agent.

    With ``teacher`` the executed actions come from that controller instead of
    the policy; the recorded ``pre_squash`` is then the teacher's action
    mapped back through ``atanh`` (used for behaviour cloning).
    """
    mode = CommMode(mode)
    if action_mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    slots = [_Slot(a, e, f, mode, horizon, episode_meta(e, None if indices is None else indices[k]))
             for k, (a, e, f) in enumerate(jobs)]
    hidden = [torch.zeros(s.world.n_agents, policy.arch.hidden_dim, dtype=torch.float64) for s in slots]
    heads = policy.heads
    with torch.no_grad():
        while True:
            live = [k for k, s in enumerate(slots) if not s.done]
            if not live:
                break
            rows, digests = [], []
            for k in live:
                s = slots[k]
                w = s.world
                for i in range(w.n_agents):
                    obs = observe(w, i)
                    pose = w.agents[i].pose
                    update_map(s.maps[i], obs, s.prev_poses[i], pose)
                    dg = map_summary(s.maps[i], pose)
                    rows.append(np.concatenate([obs.features(w.horizon), obs.goal_signature.vector, dg]))
                    digests.append(dg)
            x = torch.as_tensor(np.stack(rows))
            emb = torch.tanh(policy.encoder(x))
            dig = torch.as_tensor(np.stack(digests))
            msgs, offs, rounds = [], 0, {}
            for k in live:
                s = slots[k]
                n = s.world.n_agents
                rr = run_round(s.mode, list(emb[offs:offs + n]), list(dig[offs:offs + n]), s.memories, heads,
                               s.world.t, s.comm_log)
                rounds[k] = rr
                msgs.extend(m.vector for m in rr.messages)
                offs += n
            msg = torch.stack(msgs)
            h = torch.cat([hidden[k] for k in live])
            mean, log_std, value, h_new = policy.core_step(emb, msg, h)
            if action_mode == "deterministic":
                u = mean
            elif action_mode == "sample":
                u = mean + torch.exp(log_std) * torch.as_tensor(rng.standard_normal(tuple(mean.shape)))
            else:
                raise ValueError(f"unknown action mode {action_mode!r}")
            logp = squashed_log_prob(u, mean, log_std)
            a = torch.tanh(u).numpy()
            offs = 0
            for k in live:
                s = slots[k]
                w = s.world
                n = w.n_agents
                hidden[k] = h_new[offs:offs + n]
                if teacher is None:
                    acts = [Action(float(a[offs + i, 0]), float(a[offs + i, 1])) for i in range(n)]
                else:
                    acts = [teacher(w, i) for i in range(n)]
                    for i in range(n):
                        u[offs + i] = torch.atanh(torch.tensor([acts[i].v, acts[i].w]).clamp(-TEACHER_CLIP, TEACHER_CLIP))
                was_frozen = [ag.frozen for ag in w.agents]
                s.prev_poses = [ag.pose for ag in w.agents]
                t = w.t
                s.world, outs = step(w, acts)
                rr = rounds[k]
                for i in range(n):
                    if was_frozen[i]:
                        continue
                    o = outs[i]
                    r = compute_reward(o.delta_geodesic, o.collided)
                    s.reward += r
                    if not record:
                        continue
                    q = s.seqs[i]
                    j = offs + i
                    q.inputs.append(rows[j])
                    q.sup_logits.append(rr.supporter_logits[i].numpy().copy())
                    q.sup_values.append(rr.supporter_values[i].numpy().copy())
                    q.messages.append(msg[j].numpy().copy())
                    q.pre_squash.append(u[j].numpy().copy())
                    q.log_probs.append(float(logp[j]))
                    q.values.append(float(value[j]))
                    q.rewards.append(r)
                    q.dones.append(bool(o.succeeded or o.done))
                    q.collided.append(bool(o.collided))
                    q.deltas.append(float(o.delta_geodesic))
                    q.actions.append((acts[i].v, acts[i].w))
                poses = [ag.pose.as_tuple() for ag in s.world.agents]
                s.recorder.record(t + 1, poses, [(ac.v, ac.w) for ac in acts], [o.collided for o in outs],
                                  [o.succeeded for o in outs], rr.log_entry)
                if any(o.done for o in outs) and all(o.done for o in outs):
                    s.done = True
                offs += n
    out = []
    for s in slots:
        w = s.world
        log = s.recorder.finish([w.geodesic(i) for i in range(w.n_agents)])
        out.append(EpisodeResult(log, [q for q in s.seqs if len(q)], s.reward, s.comm_log.total_scalars))
    return out


def run_baseline_episode(arena: Arena, episode: EpisodeSpec, controller: Callable[[WorldState, int], Action],
                         fields=None, horizon: int = 80, success_radius: float = 1.0, index: int | None = None
                         ) -> EpisodeResult:
    """Play one episode with a hand-written controller (no sensing or communication)."""
    w = make_world(arena, episode, fields, horizon=horizon, success_radius=success_radius)
    n = w.n_agents
    rec = TrajectoryRecorder(episode_meta(episode, index), [(p.x, p.y) for p in episode.starts],
                             [w.geodesic(i) for i in range(n)], horizon)
    seqs = [AgentSequence(i, n, CommMode.NONE.value) for i in range(n)]
    total = 0.0
    while True:
        acts = [controller(w, i) for i in range(n)]
        was_frozen = [ag.frozen for ag in w.agents]
        t = w.t
        w, outs = step(w, acts)
        for i, o in enumerate(outs):
            if was_frozen[i]:
                continue
            r = compute_reward(o.delta_geodesic, o.collided)
            total += r
            q = seqs[i]
            q.rewards.append(r)
            q.dones.append(bool(o.succeeded or o.done))
            q.collided.append(bool(o.collided))
            q.deltas.append(float(o.delta_geodesic))
            q.actions.append((acts[i].v, acts[i].w))
        rec.record(t + 1, [ag.pose.as_tuple() for ag in w.agents], [(a.v, a.w) for a in acts],
                   [o.collided for o in outs], [o.succeeded for o in outs])
        if all(o.done for o in outs):
            break
    log = rec.finish([w.geodesic(i) for i in range(n)])
    return EpisodeResult(log, seqs, total, 0)
