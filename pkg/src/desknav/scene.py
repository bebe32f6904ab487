"""Procedural arenas, geodesic distance fields and episode placement.

Coordinates are metres with the origin at the arena's lower-left corner.
``occupancy[row, col]`` covers ``x in [col*cell, (col+1)*cell)`` and
``y in [row*cell, (row+1)*cell)``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

CELL_SIZE = 0.1
AGENT_RADIUS = 0.18
R_MAX = 15.0
N_RAYS = 72
MAX_PLACEMENT_ATTEMPTS = 10_000
MAX_ARENA_RETRIES = 20

DIFFICULTY_BINS = {
    "easy": (1.5, 3.0),
    "medium": (3.0, 5.0),
    "hard": (5.0, 10.0),
}


class GenerationError(RuntimeError):
    pass


class PlacementError(RuntimeError):
    pass


class NotNavigableError(ValueError):
    pass


class Task(str, Enum):
    COMMON = "CommonGoal"
    SPECIFIC = "SpecificGoal"


def wrap_angle(a: float) -> float:
    """Normalize an angle into (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    o: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "o", wrap_angle(float(self.o)))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.o)


@dataclass(frozen=True)
class ArenaStyle:
    """Room-layout knobs for the recursive partition generator."""

    min_room: float = 3.0
    max_depth: int = 4
    wall_thickness: float = 0.2
    door_width: tuple[float, float] = (0.9, 1.3)
    obstacles_per_room: tuple[int, int] = (0, 2)
    obstacle_size: tuple[float, float] = (0.4, 1.2)

    @classmethod
    def empty(cls) -> "ArenaStyle":
        return cls(max_depth=0, obstacles_per_room=(0, 0))


@dataclass(frozen=True, eq=False)
class Arena:
    id: str
    width: float
    height: float
    cell_size: float
    occupancy: np.ndarray
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.cell_size)), int(math.floor(x / self.cell_size))

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x < self.width and 0.0 <= y < self.height

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (col + 0.5) * self.cell_size, (row + 0.5) * self.cell_size

    def clearance(self, x: float, y: float, reach: float = 0.5) -> float:
        """Distance from a point to the nearest obstacle cell (0 inside one)."""
        cs = self.cell_size
        k = int(math.ceil(reach / cs)) + 1
        r, c = self.cell_of(x, y)
        rows, cols = self.occupancy.shape
        r0, r1 = max(r - k, 0), min(r + k + 1, rows)
        c0, c1 = max(c - k, 0), min(c + k + 1, cols)
        if r0 >= r1 or c0 >= c1:
            return 0.0
        rr, cc = np.nonzero(self.occupancy[r0:r1, c0:c1])
        if rr.size == 0:
            return reach
        lo_x = (cc + c0) * cs
        lo_y = (rr + r0) * cs
        dx = np.maximum(np.maximum(lo_x - x, x - (lo_x + cs)), 0.0)
        dy = np.maximum(np.maximum(lo_y - y, y - (lo_y + cs)), 0.0)
        return float(min(np.sqrt(dx * dx + dy * dy).min(), reach))

    def disc_free(self, x: float, y: float, radius: float = AGENT_RADIUS) -> bool:
        if not (radius <= x <= self.width - radius and radius <= y <= self.height - radius):
            return False
        return self.clearance(x, y, reach=radius + self.cell_size) >= radius

    def digest(self) -> str:
        return hashlib.sha256(np.packbits(self.occupancy).tobytes()).hexdigest()[:16]

    def to_json(self) -> dict:
        rows, cols = self.occupancy.shape
        bits = np.packbits(self.occupancy.astype(np.uint8).ravel())
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "cell_size": self.cell_size,
            "seed": self.seed,
            "rows": rows,
            "cols": cols,
            "occupancy": base64.b64encode(bits.tobytes()).decode("ascii"),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Arena":
        rows, cols = d["rows"], d["cols"]
        bits = np.frombuffer(base64.b64decode(d["occupancy"]), dtype=np.uint8)
        occ = np.unpackbits(bits)[: rows * cols].reshape(rows, cols).astype(bool)
        occ.setflags(write=False)
        return cls(d["id"], float(d["width"]), float(d["height"]), float(d["cell_size"]), occ, int(d["seed"]))


def _freeze(occ: np.ndarray) -> np.ndarray:
    occ = np.ascontiguousarray(occ, dtype=bool)
    occ.setflags(write=False)
    return occ


def arena_from_grid(occupancy: np.ndarray, cell_size: float = CELL_SIZE, id: str = "custom", seed: int = 0) -> Arena:
    """Wrap a hand-built occupancy grid (used by tests and tools)."""
    rows, cols = occupancy.shape
    return Arena(id, cols * cell_size, rows * cell_size, cell_size, _freeze(occupancy.copy()), seed)


def _partition(occ, rng, region, depth, style, cs, doors):
    # region = (r0, r1, c0, c1), half-open interior bounds
    r0, r1, c0, c1 = region
    h, w = r1 - r0, c1 - c0
    min_room = int(round(style.min_room / cs))
    t = max(1, int(round(style.wall_thickness / cs)))
    can_v = w >= 2 * min_room + t
    can_h = h >= 2 * min_room + t
    if depth >= style.max_depth or not (can_v or can_h):
        return [region]
    vertical = can_v and (not can_h or w > h or (w == h and rng.random() < 0.5))
    lo_pos = (c0 if vertical else r0) + min_room
    hi_pos = (c1 if vertical else r1) - min_room - t

    def blocks_door(pos):
        # a new wall must not end in front of a doorway cut into the region border
        for axis, fixed, d_lo, d_hi in doors:
            if vertical and axis == "h" and r0 - t <= fixed <= r1:
                if pos + t - 1 >= d_lo - 1 and pos <= d_hi + 1:
                    return True
            if not vertical and axis == "v" and c0 - t <= fixed <= c1:
                if pos + t - 1 >= d_lo - 1 and pos <= d_hi + 1:
                    return True
        return False

    pos = None
    for _ in range(12):
        cand = int(rng.integers(lo_pos, hi_pos + 1))
        if not blocks_door(cand):
            pos = cand
            break
    if pos is None:
        return [region]
    dw_lo, dw_hi = (int(round(x / cs)) for x in style.door_width)
    door = int(rng.integers(dw_lo, dw_hi + 1))
    if vertical:
        occ[r0:r1, pos:pos + t] = True
        start = int(rng.integers(r0 + 1, max(r0 + 2, r1 - door - 1)))
        occ[start:start + door, pos:pos + t] = False
        doors = doors + [("v", pos, start, start + door - 1)]
        a, b = (r0, r1, c0, pos), (r0, r1, pos + t, c1)
    else:
        occ[pos:pos + t, c0:c1] = True
        start = int(rng.integers(c0 + 1, max(c0 + 2, c1 - door - 1)))
        occ[pos:pos + t, start:start + door] = False
        doors = doors + [("h", pos, start, start + door - 1)]
        a, b = (r0, pos, c0, c1), (pos + t, r1, c0, c1)
    return (_partition(occ, rng, a, depth + 1, style, cs, doors)
            + _partition(occ, rng, b, depth + 1, style, cs, doors))


def _place_furniture(occ, rng, rooms, style, cs):
    lo_n, hi_n = style.obstacles_per_room
    if hi_n <= 0:
        return
    s_lo, s_hi = (max(1, int(round(x / cs))) for x in style.obstacle_size)
    margin = int(math.ceil(0.6 / cs))  # keep a lane along walls and in front of doors
    for r0, r1, c0, c1 in rooms:
        for _ in range(int(rng.integers(lo_n, hi_n + 1))):
            bh = int(rng.integers(s_lo, s_hi + 1))
            bw = int(rng.integers(s_lo, s_hi + 1))
            if r1 - r0 - 2 * margin <= bh or c1 - c0 - 2 * margin <= bw:
                continue
            rr = int(rng.integers(r0 + margin, r1 - margin - bh + 1))
            cc = int(rng.integers(c0 + margin, c1 - margin - bw + 1))
            occ[rr:rr + bh, cc:cc + bw] = True


def navigable_mask(arena: Arena, agent_radius: float = AGENT_RADIUS) -> np.ndarray:
    """Cells whose centre keeps an agent disc clear of every obstacle cell."""
    return _navigable_mask_cached(arena.occupancy.tobytes(), arena.occupancy.shape, arena.cell_size, float(agent_radius))


@lru_cache(maxsize=64)
def _navigable_mask_cached(occ_bytes, shape, cs, radius):
    occ = np.frombuffer(occ_bytes, dtype=bool).reshape(shape)
    # edt gives centre-to-centre distance; subtract half a cell to reach the obstacle face
    dist = ndimage.distance_transform_edt(~occ) * cs - 0.5 * cs
    mask = (dist >= radius) & ~occ
    mask.setflags(write=False)
    return mask


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def generate_arena(seed: int, width: float, height: float, style: ArenaStyle | None = None) -> Arena:
    """Build a walled arena of rooms and doorways from a seed.

    Layouts whose largest navigable component covers less than half of the
    interior are rejected and redrawn from a derived seed.
    """
    if not (10.0 <= width <= 30.0 and 10.0 <= height <= 30.0):
        raise ValueError(f"arena dimensions must lie in [10, 30] m, got {width} x {height}")
    style = style or ArenaStyle()
    cs = CELL_SIZE
    rows, cols = int(round(height / cs)), int(round(width / cs))
    for attempt in range(MAX_ARENA_RETRIES):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, attempt])
        occ = np.zeros((rows, cols), dtype=bool)
        occ[0, :] = occ[-1, :] = True
        occ[:, 0] = occ[:, -1] = True
        rooms = _partition(occ, rng, (1, rows - 1, 1, cols - 1), 0, style, cs, [])
        _place_furniture(occ, rng, rooms, style, cs)
        arena = Arena(f"arena-{seed}-{cols}x{rows}", cols * cs, rows * cs, cs, _freeze(occ), int(seed))
        interior = (rows - 2) * (cols - 2)
        if largest_component(navigable_mask(arena)).sum() >= 0.5 * interior:
            return arena
    raise GenerationError(f"no acceptable layout for seed {seed} after {MAX_ARENA_RETRIES} retries")


# --------------------------------------------------------------------------
# geodesic distances
# --------------------------------------------------------------------------

_OFFSETS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
_KNIGHT = [(-2, -1), (-2, 1), (-1, -2), (-1, 2), (1, -2), (1, 2), (2, -1), (2, 1)]


def _graph(mask: np.ndarray, cs: float, connectivity: int) -> csr_matrix:
    rows, cols = mask.shape
    idx = np.arange(rows * cols).reshape(rows, cols)
    src, dst, wts = [], [], []
    offsets = list(_OFFSETS_8) + (_KNIGHT if connectivity == 16 else [])
    for dr, dc in offsets:
        a = mask[max(0, -dr):rows - max(0, dr), max(0, -dc):cols - max(0, dc)]
        b = mask[max(0, dr):rows + min(0, dr), max(0, dc):cols + min(0, dc)]
        ok = a & b
        if abs(dr) + abs(dc) == 3:
            # knight moves must not skip over the two cells they pass through
            sr, sc = (int(np.sign(dr)), 0) if abs(dr) == 2 else (0, int(np.sign(dc)))
            for mr, mc in ((sr, sc), (dr - sr, dc - sc)):
                shifted = np.zeros_like(mask)
                r_lo, r_hi = max(0, -mr), rows - max(0, mr)
                c_lo, c_hi = max(0, -mc), cols - max(0, mc)
                shifted[r_lo:r_hi, c_lo:c_hi] = mask[r_lo + mr:r_hi + mr, c_lo + mc:c_hi + mc]
                ok &= shifted[max(0, -dr):rows - max(0, dr), max(0, -dc):cols - max(0, dc)]
        s = idx[max(0, -dr):rows - max(0, dr), max(0, -dc):cols - max(0, dc)][ok]
        src.append(s)
        dst.append(s + dr * cols + dc)
        wts.append(np.full(s.size, cs * math.hypot(dr, dc)))
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    wts = np.concatenate(wts)
    return csr_matrix((wts, (src, dst)), shape=(rows * cols, rows * cols))


@lru_cache(maxsize=32)
def _graph_cached(occ_bytes, shape, cs, radius, connectivity):
    mask = _navigable_mask_cached(occ_bytes, shape, cs, radius)
    return _graph(mask, cs, connectivity)


@dataclass(frozen=True, eq=False)
class GeodesicField:
    goal: Pose
    distances: np.ndarray
    inflation_radius: float
    cell_size: float = CELL_SIZE

    def at_cell(self, row: int, col: int) -> float:
        return float(self.distances[row, col])

    def distance_at(self, x: float, y: float) -> float:
        """Geodesic distance at a world point.

        A disc touching a wall can sit in a cell whose centre is inside the
        inflated band; those points borrow the best neighbouring cell plus
        the straight hop to it.
        """
        rows, cols = self.distances.shape
        r, c = int(math.floor(y / self.cell_size)), int(math.floor(x / self.cell_size))
        if not (0 <= r < rows and 0 <= c < cols):
            raise ValueError(f"point ({x:.3f}, {y:.3f}) outside the field")
        d = self.distances[r, c]
        if np.isfinite(d):
            return float(d)
        r0, r1, c0, c1 = max(r - 2, 0), min(r + 3, rows), max(c - 2, 0), min(c + 3, cols)
        win = self.distances[r0:r1, c0:c1]
        if not np.isfinite(win).any():
            return math.inf
        rr, cc = np.mgrid[r0:r1, c0:c1]
        hop = np.hypot((cc + 0.5) * self.cell_size - x, (rr + 0.5) * self.cell_size - y)
        return float(np.min(win + hop))


def compute_geodesic_field(arena: Arena, goal: Pose, agent_radius: float = AGENT_RADIUS,
                           connectivity: int = 16) -> GeodesicField:
    """Shortest traversable distance from every cell to ``goal``.

    Obstacles are inflated by ``agent_radius``. Straight and diagonal steps
    cost ``cell*1`` and ``cell*sqrt(2)``; with ``connectivity=16`` knight
    steps (``cell*sqrt(5)``) are added, which keeps the grid metric within
    about 3% of the Euclidean one.
    """
    if agent_radius <= 0:
        raise ValueError("agent_radius must be positive")
    if connectivity not in (8, 16):
        raise ValueError("connectivity must be 8 or 16")
    if not arena.contains(goal.x, goal.y):
        raise NotNavigableError("goal outside arena")
    occ = arena.occupancy
    mask = _navigable_mask_cached(occ.tobytes(), occ.shape, arena.cell_size, float(agent_radius))
    r, c = arena.cell_of(goal.x, goal.y)
    if not mask[r, c]:
        raise NotNavigableError("goal not navigable")
    graph = _graph_cached(occ.tobytes(), occ.shape, arena.cell_size, float(agent_radius), connectivity)
    dist = dijkstra(graph, directed=True, indices=r * occ.shape[1] + c)
    dist = dist.reshape(occ.shape)
    dist.setflags(write=False)
    return GeodesicField(goal, dist, float(agent_radius), arena.cell_size)


# --------------------------------------------------------------------------
# ray casting
# --------------------------------------------------------------------------

def cast_rays(arena: Arena, x: float, y: float, angles: np.ndarray, r_max: float = R_MAX,
              step: float | None = None) -> np.ndarray:
    """Distance along each ray to the first obstacle cell, clipped at ``r_max``.

    Rays are sampled at a quarter cell and the first occupied cell found is
    intersected exactly (slab test), so depths are exact except for rays
    that only graze a cell corner thinner than the sampling step.
    """
    cs = arena.cell_size
    step = step or cs / 4
    occ = arena.occupancy
    rows, cols = occ.shape
    ts = np.arange(1, int(math.ceil(r_max / step)) + 1) * step
    dx, dy = np.cos(angles), np.sin(angles)
    px = x + dx[:, None] * ts[None, :]
    py = y + dy[:, None] * ts[None, :]
    ci = np.floor(px / cs).astype(np.int64)
    ri = np.floor(py / cs).astype(np.int64)
    outside = (ci < 0) | (ci >= cols) | (ri < 0) | (ri >= rows)
    hit = outside.copy()
    inside = ~outside
    hit[inside] = occ[ri[inside], ci[inside]]
    any_hit = hit.any(axis=1)
    first = np.argmax(hit, axis=1)
    depth = np.full(angles.shape, r_max, dtype=float)
    k = np.nonzero(any_hit)[0]
    if k.size:
        hr = ri[k, first[k]]
        hc = ci[k, first[k]]
        lo_x, lo_y = hc * cs, hr * cs
        with np.errstate(divide="ignore", invalid="ignore"):
            tx1 = (lo_x - x) / dx[k]
            tx2 = (lo_x + cs - x) / dx[k]
            ty1 = (lo_y - y) / dy[k]
            ty2 = (lo_y + cs - y) / dy[k]
        tx_near = np.where(np.abs(dx[k]) < 1e-15, -np.inf, np.minimum(tx1, tx2))
        ty_near = np.where(np.abs(dy[k]) < 1e-15, -np.inf, np.minimum(ty1, ty2))
        entry = np.maximum(np.maximum(tx_near, ty_near), 0.0)
        # sampled point lies inside the cell, so the entry is at most that sample
        entry = np.minimum(entry, ts[first[k]])
        depth[k] = np.minimum(entry, r_max)
    return depth


def ray_angles(heading: float, k: int = N_RAYS) -> np.ndarray:
    return heading + 2.0 * math.pi * np.arange(k) / k


@dataclass(frozen=True, eq=False)
class GoalSignature:
    vector: np.ndarray
    pose_free: bool = True

    def to_list(self) -> list[float]:
        return [float(v) for v in self.vector]


def render_goal_signature(arena: Arena, pose: Pose, k: int = N_RAYS, r_max: float = R_MAX) -> GoalSignature:
    """Normalized panoramic depth scan taken at ``pose``."""
    depth = cast_rays(arena, pose.x, pose.y, ray_angles(pose.o, k), r_max)
    vec = np.clip(depth / r_max, 0.0, 1.0)
    vec.setflags(write=False)
    return GoalSignature(vec)


# --------------------------------------------------------------------------
# episode placement
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EpisodeSpec:
    arena_id: str
    n_agents: int
    starts: list[Pose]
    goals: list[Pose]
    goal_signatures: list[GoalSignature]
    difficulty: str
    task: str
    seed: int
    start_geodesic: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "arena_id": self.arena_id,
            "n_agents": self.n_agents,
            "starts": [list(p.as_tuple()) for p in self.starts],
            "goals": [list(p.as_tuple()) for p in self.goals],
            "goal_signatures": [s.to_list() for s in self.goal_signatures],
            "difficulty": self.difficulty,
            "task": self.task,
            "seed": self.seed,
            "start_geodesic": list(self.start_geodesic),
        }

    def to_jsonl(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeSpec":
        sigs = []
        for v in d["goal_signatures"]:
            a = np.asarray(v, dtype=float)
            a.setflags(write=False)
            sigs.append(GoalSignature(a))
        return cls(
            arena_id=d["arena_id"],
            n_agents=int(d["n_agents"]),
            starts=[Pose(*p) for p in d["starts"]],
            goals=[Pose(*p) for p in d["goals"]],
            goal_signatures=sigs,
            difficulty=d["difficulty"],
            task=d["task"],
            seed=int(d["seed"]),
            start_geodesic=list(d.get("start_geodesic", [])),
        )


def _clear_of(x, y, placed, min_sep):
    return all(math.hypot(x - px, y - py) >= min_sep for px, py in placed)


def safe_init(arena: Arena, n_agents: int, difficulty: str, task: str | Task, rng: np.random.Generator,
              agent_radius: float = AGENT_RADIUS, max_attempts: int = MAX_PLACEMENT_ATTEMPTS,
              seed: int = 0, n_rays: int = N_RAYS) -> EpisodeSpec:
    """Rejection-sample collision-free starts and goals inside a difficulty bin.

    Every agent's start-to-goal geodesic distance lands in the bin; starts
    (and SpecificGoal goals) keep ``2*radius + 0.05`` m of mutual clearance.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    task = Task(task).value
    lo, hi = DIFFICULTY_BINS[difficulty]
    min_sep = 2 * agent_radius + 0.05
    mask = navigable_mask(arena, agent_radius)
    free_r, free_c = np.nonzero(mask)
    if free_r.size == 0:
        raise PlacementError("cannot place episode")
    attempts = 0
    fields: dict[tuple[int, int], GeodesicField] = {}

    def sample_pose_in(cells_r, cells_c, placed):
        nonlocal attempts
        while attempts < max_attempts:
            attempts += 1
            j = int(rng.integers(cells_r.size))
            x, y = arena.cell_center(int(cells_r[j]), int(cells_c[j]))
            if arena.disc_free(x, y, agent_radius) and _clear_of(x, y, placed, min_sep):
                return Pose(x, y, float(rng.uniform(-math.pi, math.pi)))
        return None

    def field_for(goal):
        key = arena.cell_of(goal.x, goal.y)
        if key not in fields:
            fields[key] = compute_geodesic_field(arena, goal, agent_radius)
        return fields[key]

    while attempts < max_attempts:
        n_goals = 1 if task == Task.COMMON.value else n_agents
        goals: list[Pose] = []
        for _ in range(n_goals):
            g = sample_pose_in(free_r, free_c, [(p.x, p.y) for p in goals])
            if g is None:
                break
            goals.append(g)
        if len(goals) < n_goals:
            break
        if task == Task.COMMON.value:
            goals = [goals[0]] * n_agents
        starts: list[Pose] = []
        dists: list[float] = []
        for n in range(n_agents):
            fld = field_for(goals[n])
            d = fld.distances
            ok_r, ok_c = np.nonzero(mask & (d >= lo) & (d <= hi))
            if ok_r.size == 0:
                attempts += 1
                break
            s = sample_pose_in(ok_r, ok_c, [(p.x, p.y) for p in starts])
            if s is None:
                break
            starts.append(s)
            dists.append(fld.distance_at(s.x, s.y))
        if len(starts) == n_agents and all(lo <= d <= hi for d in dists):
            sigs = [render_goal_signature(arena, g, n_rays) for g in goals]
            return EpisodeSpec(arena.id, n_agents, starts, goals, sigs, difficulty, task, int(seed), dists)
    raise PlacementError("cannot place episode")
