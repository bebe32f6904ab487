"""Differential-drive world: kinematics, collisions, panoramic sensing, success."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .scene import (
    AGENT_RADIUS,
    N_RAYS,
    R_MAX,
    Arena,
    EpisodeSpec,
    GeodesicField,
    GoalSignature,
    Pose,
    cast_rays,
    compute_geodesic_field,
    ray_angles,
    wrap_angle,
)

V_MAX = 0.70
W_MAX = math.pi
STEP_SECONDS = 1.0
SUBSTEPS = 10
MAX_STEPS = 80
SUCCESS_RADIUS = 1.0

HIT_WALL, HIT_AGENT, HIT_NONE = 0, 1, 2


@dataclass(frozen=True)
class Action:
    v: float
    w: float

    def __post_init__(self):
        object.__setattr__(self, "v", float(min(1.0, max(-1.0, self.v))))
        object.__setattr__(self, "w", float(min(1.0, max(-1.0, self.w))))


@dataclass(frozen=True)
class AgentBody:
    pose: Pose
    radius: float = AGENT_RADIUS
    v_max: float = V_MAX
    w_max: float = W_MAX
    frozen: bool = False
    collided_last_step: bool = False


@dataclass(frozen=True, eq=False)
class Observation:
    depth: np.ndarray          # (K,) in [0, 1]
    hit_type: np.ndarray       # (K, 3) one-hot wall / agent / max_range
    ego_velocity: np.ndarray   # (2,) normalized command of the previous step
    goal_signature: GoalSignature
    step_index: int

    @property
    def n_rays(self) -> int:
        return self.depth.shape[0]

    def features(self, horizon: int = MAX_STEPS) -> np.ndarray:
        """Flat vector: depths, hit one-hots, ego velocity, normalized step."""
        return np.concatenate([
            self.depth,
            self.hit_type.ravel(),
            self.ego_velocity,
            [self.step_index / horizon],
        ])


def observation_size(n_rays: int = N_RAYS) -> int:
    return 4 * n_rays + 3


@dataclass(frozen=True)
class StepOutcome:
    delta_geodesic: float
    collided: bool
    succeeded: bool
    done: bool


@dataclass(frozen=True, eq=False)
class WorldState:
    arena: Arena
    agents: tuple[AgentBody, ...]
    t: int
    episode: EpisodeSpec | None
    fields: tuple[GeodesicField, ...]
    last_actions: tuple[Action, ...] = ()
    horizon: int = MAX_STEPS
    success_radius: float = SUCCESS_RADIUS
    substeps: int = SUBSTEPS
    n_rays: int = N_RAYS

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def geodesic(self, i: int) -> float:
        p = self.agents[i].pose
        return self.fields[i].distance_at(p.x, p.y)


def make_world(arena: Arena, episode: EpisodeSpec, fields: list[GeodesicField] | None = None,
               **kwargs) -> WorldState:
    """Place agents at the episode starts; goal fields are shared for identical goals."""
    if fields is None:
        cache: dict[tuple[float, float], GeodesicField] = {}
        fields = []
        for g in episode.goals:
            key = (g.x, g.y)
            if key not in cache:
                cache[key] = compute_geodesic_field(arena, g)
            fields.append(cache[key])
    agents = tuple(AgentBody(pose=p) for p in episode.starts)
    acts = tuple(Action(0.0, 0.0) for _ in agents)
    return WorldState(arena, agents, 0, episode, tuple(fields), acts, **kwargs)


def _arc(x, y, o, v, w, dt):
    # chord form: stays exact as w -> 0, where v/w * (sin - sin) cancels badly
    h = 0.5 * w * dt
    chord = v * dt * (math.sin(h) / h if h != 0.0 else 1.0)
    return x + chord * math.cos(o + h), y + chord * math.sin(o + h)


def _overlaps(x, y, others, min_d):
    for ox, oy in others:
        if (x - ox) ** 2 + (y - oy) ** 2 < min_d * min_d:
            return True
    return False


def step(world: WorldState, actions: list[Action]) -> tuple[WorldState, list[StepOutcome]]:
    """Advance every agent by one 1 s step of constant-twist motion.

    The step is integrated in ``world.substeps`` exact arc segments. An agent
    whose disc would touch an obstacle or another agent during a substep is
    moved to the contact point, stops translating for the rest of the step
    and keeps rotating.
    """
    n = world.n_agents
    if len(actions) != n:
        raise ValueError(f"expected {n} actions, got {len(actions)}")
    if world.t >= world.horizon:
        raise ValueError("episode already over")
    actions = [a if isinstance(a, Action) else Action(*a) for a in actions]
    arena = world.arena
    dt = STEP_SECONDS / world.substeps
    xs = [a.pose.x for a in world.agents]
    ys = [a.pose.y for a in world.agents]
    os_ = [a.pose.o for a in world.agents]
    moving = [not a.frozen for a in world.agents]
    halted = [False] * n
    collided = [False] * n
    v = [actions[i].v * world.agents[i].v_max if moving[i] else 0.0 for i in range(n)]
    w = [actions[i].w * world.agents[i].w_max if moving[i] else 0.0 for i in range(n)]
    radius = [a.radius for a in world.agents]

    for _ in range(world.substeps):
        cand = []
        for i in range(n):
            if moving[i] and not halted[i] and v[i] != 0.0:
                cand.append(_arc(xs[i], ys[i], os_[i], v[i], w[i], dt))
            else:
                cand.append((xs[i], ys[i]))
        # classify movers: free, blocked by an obstacle only, blocked by an agent
        blocked_obs, blocked_agent = [False] * n, [False] * n
        for i in range(n):
            if cand[i] == (xs[i], ys[i]):
                continue
            cx, cy = cand[i]
            if not arena.disc_free(cx, cy, radius[i]):
                blocked_obs[i] = True
            others = [(xs[j], ys[j]) for j in range(n) if j != i] + [cand[j] for j in range(n) if j != i]
            if _overlaps(cx, cy, others, 2 * radius[i]):
                blocked_agent[i] = True
        final = list(cand)
        for i in range(n):
            if blocked_agent[i]:
                final[i] = (xs[i], ys[i])
        # obstacle-only contacts slide forward to the contact point
        contact = [i for i in range(n) if blocked_obs[i] and not blocked_agent[i]]
        for i in contact:
            others = [final[j] for j in range(n) if j != i and j not in contact]
            others += [(xs[j], ys[j]) for j in contact if j != i]
            lo, hi = 0.0, 1.0
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                px, py = _arc(xs[i], ys[i], os_[i], v[i], w[i], dt * mid)
                if arena.disc_free(px, py, radius[i]) and not _overlaps(px, py, others, 2 * radius[i]):
                    lo = mid
                else:
                    hi = mid
            final[i] = _arc(xs[i], ys[i], os_[i], v[i], w[i], dt * lo) if lo > 0 else (xs[i], ys[i])
        for a_i, i in enumerate(contact):
            for j in contact[a_i + 1:]:
                if _overlaps(*final[i], [final[j]], radius[i] + radius[j]):
                    final[i], final[j] = (xs[i], ys[i]), (xs[j], ys[j])
        for i in range(n):
            if blocked_obs[i] or blocked_agent[i]:
                halted[i] = True
                collided[i] = True
            xs[i], ys[i] = final[i]
            if moving[i]:
                os_[i] = wrap_angle(os_[i] + w[i] * dt)

    t_next = world.t + 1
    agents, outcomes = [], []
    for i, body in enumerate(world.agents):
        pose = Pose(xs[i], ys[i], os_[i]) if moving[i] else body.pose
        d_prev = world.fields[i].distance_at(body.pose.x, body.pose.y)
        d_new = world.fields[i].distance_at(pose.x, pose.y)
        succeeded = body.frozen or d_new <= world.success_radius
        agents.append(replace(body, pose=pose, frozen=succeeded, collided_last_step=collided[i]))
        delta = 0.0 if body.frozen else d_prev - d_new
        outcomes.append([delta, collided[i] and not body.frozen, succeeded])
    all_done = all(a.frozen for a in agents) or t_next >= world.horizon
    outcomes = [StepOutcome(d, c, s, all_done or s) for d, c, s in outcomes]
    new_world = replace(world, agents=tuple(agents), t=t_next, last_actions=tuple(actions))
    return new_world, outcomes


def _disc_hits(x, y, angles, centers, radius):
    """Nearest ray-disc intersection distance per ray (inf when missed)."""
    out = np.full(angles.shape, np.inf)
    if not centers:
        return out
    dx, dy = np.cos(angles), np.sin(angles)
    for cx, cy in centers:
        ox, oy = cx - x, cy - y
        proj = dx * ox + dy * oy
        perp2 = ox * ox + oy * oy - proj * proj
        disc = radius * radius - perp2
        ok = (disc >= 0) & (proj > 0)
        t = np.where(ok, proj - np.sqrt(np.maximum(disc, 0.0)), np.inf)
        t = np.where(t < 0, np.inf, t)
        out = np.minimum(out, t)
    return out


def raycast_panorama(arena: Arena, agents: list[AgentBody] | tuple[AgentBody, ...], self_index: int,
                     k: int = N_RAYS, r_max: float = R_MAX) -> tuple[np.ndarray, np.ndarray]:
    """K uniformly spaced rays starting at the agent heading.

    Returns normalized depths (K,) and hit-type one-hots (K, 3); other agents
    show up as discs of their own radius.
    """
    me = agents[self_index].pose
    angles = ray_angles(me.o, k)
    wall = cast_rays(arena, me.x, me.y, angles, r_max)
    others = [(a.pose.x, a.pose.y) for j, a in enumerate(agents) if j != self_index]
    radius = agents[self_index].radius if not others else max(a.radius for j, a in enumerate(agents) if j != self_index)
    agent = _disc_hits(me.x, me.y, angles, others, radius)
    depth = np.minimum(np.minimum(wall, agent), r_max)
    kind = np.where(agent < wall, HIT_AGENT, HIT_WALL)
    kind = np.where(depth >= r_max, HIT_NONE, kind)
    onehot = np.zeros((k, 3))
    onehot[np.arange(k), kind] = 1.0
    return depth / r_max, onehot


def observe(world: WorldState, i: int) -> Observation:
    depth, onehot = raycast_panorama(world.arena, world.agents, i, world.n_rays)
    a = world.last_actions[i] if world.last_actions else Action(0.0, 0.0)
    sig = world.episode.goal_signatures[i] if world.episode is not None else GoalSignature(np.zeros(world.n_rays))
    return Observation(depth, onehot, np.array([a.v, a.w]), sig, world.t)


def check_success(field: GeodesicField, pose: Pose, radius: float = SUCCESS_RADIUS) -> bool:
    """Geodesic distance at the pose is within the (inclusive) success radius."""
    rows, cols = field.distances.shape
    if not (0 <= pose.x < cols * field.cell_size and 0 <= pose.y < rows * field.cell_size):
        raise ValueError("pose outside arena")
    return field.distance_at(pose.x, pose.y) <= radius


def collision_free(world: WorldState, eps: float = 1e-9) -> bool:
    """Non-penetration check used by tests and dataset validation."""
    ags = world.agents
    for i, a in enumerate(ags):
        if world.arena.clearance(a.pose.x, a.pose.y, reach=a.radius + 0.2) < a.radius - eps:
            return False
        for b in ags[i + 1:]:
            if math.hypot(a.pose.x - b.pose.x, a.pose.y - b.pose.y) < a.radius + b.radius - eps:
                return False
    return True
