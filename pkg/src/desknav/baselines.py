"""Hand-written controllers: a geodesic follower and a uniform random policy."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import binary_erosion

from scipy.sparse.csgraph import dijkstra

from .scene import AGENT_RADIUS, Arena, GeodesicField, NotNavigableError, Pose, _graph, wrap_angle
from .sim import SUBSTEPS, SUCCESS_RADIUS, V_MAX, W_MAX, Action, WorldState, _arc

TURN_IN_PLACE = 0.35  # rad; larger heading errors rotate without translating
LOOKAHEAD_CELLS = 40
PARK_MARGINS = (0.1, 0.04, 0.0)  # keep-out around blocking agents, widest first
WALL_MARGIN = 0.02
_NEIGHBOURS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc]
_KNIGHTS = [(-2, -1), (-2, 1), (-1, -2), (-1, 2), (1, -2), (1, 2), (2, -1), (2, 1)]

_safe_cache: dict[int, tuple[GeodesicField, np.ndarray]] = {}


def _safe_mask(field: GeodesicField) -> np.ndarray:
    """Navigable cells one cell away from the inflated boundary."""
    hit = _safe_cache.get(id(field))
    if hit is not None and hit[0] is field:
        return hit[1]
    finite = np.isfinite(field.distances)
    safe = binary_erosion(finite, structure=np.ones((3, 3), bool), border_value=0)
    if len(_safe_cache) > 256:
        _safe_cache.clear()
    _safe_cache[id(field)] = (field, safe)
    return safe


def _start_cell(field: GeodesicField, x: float, y: float) -> tuple[int, int]:
    cs = field.cell_size
    d = field.distances
    r, c = int(math.floor(y / cs)), int(math.floor(x / cs))
    if np.isfinite(d[r, c]):
        return r, c
    r0, r1, c0, c1 = max(r - 2, 0), min(r + 3, d.shape[0]), max(c - 2, 0), min(c + 3, d.shape[1])
    rr, cc = np.mgrid[r0:r1, c0:c1]
    cost = d[r0:r1, c0:c1] + np.hypot((cc + 0.5) * cs - x, (rr + 0.5) * cs - y)
    k = int(np.argmin(cost))
    return int(rr.ravel()[k]), int(cc.ravel()[k])


def descent_chain(field: GeodesicField, x: float, y: float, length: int = LOOKAHEAD_CELLS) -> list[tuple[int, int]]:
    """Cells visited by steepest descent of the field, starting near (x, y)."""
    d = field.distances
    rows, cols = d.shape
    cell = _start_cell(field, x, y)
    chain = [cell]
    while len(chain) < length and d[cell] > 0:
        r, c = cell
        best, best_d = None, d[cell]
        for dr, dc in _NEIGHBOURS + _KNIGHTS:
            rr, cc = r + dr, c + dc
            if not (0 <= rr < rows and 0 <= cc < cols) or d[rr, cc] >= best_d:
                continue
            if abs(dr) + abs(dc) == 3:
                # a knight hop must not clip the two cells it passes between
                mr, mc = (r + dr // 2, c) if abs(dr) == 2 else (r, c + dc // 2)
                nr, nc = (r + dr - dr // 2, c + dc) if abs(dr) == 2 else (r + dr, c + dc - dc // 2)
                if not (np.isfinite(d[mr, mc]) and np.isfinite(d[nr, nc])):
                    continue
            best, best_d = (rr, cc), d[rr, cc]
        if best is None:
            break
        cell = best
        chain.append(cell)
    return chain


def _visible(safe: np.ndarray, cs: float, x0: float, y0: float, x1: float, y1: float) -> bool:
    n = max(2, int(math.ceil(math.hypot(x1 - x0, y1 - y0) / (0.5 * cs))) + 1)
    xs = np.linspace(x0, x1, n)
    ys = np.linspace(y0, y1, n)
    r = np.floor(ys / cs).astype(int)
    c = np.floor(xs / cs).astype(int)
    # the first samples may sit inside the agent's own (unsafe) start cell
    return bool(safe[r[1:], c[1:]].all())


def _sweep(arena: Arena, pose: Pose, v: float, w: float, others, radius: float, clearance: float):
    """End point of one step and whether it ran into something on the way."""
    x, y = pose.x, pose.y
    dt = 1.0 / SUBSTEPS
    o = pose.o
    for _ in range(SUBSTEPS):
        nx, ny = _arc(x, y, o, v, w, dt) if v != 0.0 else (x, y)
        c_new = arena.clearance(nx, ny, reach=radius + WALL_MARGIN + 0.2)
        if c_new < radius or (c_new < radius + WALL_MARGIN and c_new < arena.clearance(x, y, reach=radius + 0.3)):
            return x, y, True
        for ox, oy in others:
            d_new = math.hypot(nx - ox, ny - oy)
            # only closing in on someone inside the clearance counts as a hit
            if d_new < clearance and d_new < math.hypot(x - ox, y - oy):
                return x, y, True
        x, y, o = nx, ny, o + w * dt
    return x, y, False


def _detour(field: GeodesicField, arena: Arena, pose: Pose, others, radius: float,
            v_max: float, w_max: float) -> Action:
    """Greedy one-step search over commands, treating other agents as static discs."""
    clearance = 2 * radius + 0.04
    best, best_cost = Action(0.0, 0.0), field.distance_at(pose.x, pose.y)
    for vf in (1.0, 0.75, 0.5, 0.25, -0.5):
        for wf in np.linspace(-1.0, 1.0, 17):
            x, y, hit = _sweep(arena, pose, vf * v_max, float(wf) * w_max, others, radius, clearance)
            cost = field.distance_at(x, y) + (0.05 if hit else 0.0)
            if cost < best_cost - 1e-9:
                best, best_cost = Action(vf, float(wf)), cost
    return best


_region_cache: dict[tuple, tuple[GeodesicField, GeodesicField]] = {}


def _region_field(field: GeodesicField, others, radius: float, success_radius: float,
                  margin: float = PARK_MARGINS[0]) -> GeodesicField:
    """Distance to the success region with the other agents' discs blocked out."""
    key = (id(field), success_radius, margin, tuple((round(x, 4), round(y, 4)) for x, y in others))
    hit = _region_cache.get(key)
    if hit is not None and hit[0] is field:
        return hit[1]
    d = field.distances
    cs = field.cell_size
    rows, cols = d.shape
    mask = np.isfinite(d)
    yy, xx = (np.mgrid[0:rows, 0:cols] + 0.5) * cs
    for ox, oy in others:
        mask &= (xx - ox) ** 2 + (yy - oy) ** 2 >= (2 * radius + margin) ** 2
    sources = np.flatnonzero(mask & (d <= success_radius))
    out = np.full(d.shape, np.inf)
    if sources.size:
        dist = dijkstra(_graph(mask, cs, 16), directed=False, indices=sources, min_only=True)
        out = dist.reshape(rows, cols)
        out[~mask] = np.inf
    region = GeodesicField(field.goal, out, field.inflation_radius, cs)
    if len(_region_cache) > 64:
        _region_cache.clear()
    _region_cache[key] = (field, region)
    return region


def _deep_landing(field, arena, pose, others, radius, v_max, w_max, success_radius):
    """Command that ends this step deepest inside the success region, if any does."""
    best, best_d = None, success_radius
    for vf in (1.0, 0.75, 0.5, 0.25):
        for wf in np.linspace(-1.0, 1.0, 17):
            x, y, hit = _sweep(arena, pose, vf * v_max, float(wf) * w_max, others, radius, 2 * radius + 0.04)
            if hit:
                continue
            d = field.distance_at(x, y)
            if d <= best_d:
                best, best_d = Action(vf, float(wf)), d
    return best


def _path_blocked(field: GeodesicField, pose: Pose, others, radius: float, reach: float = 1.0) -> bool:
    if not others:
        return False
    cs = field.cell_size
    clearance = 2 * radius + 0.04
    chain = descent_chain(field, pose.x, pose.y, length=int(reach / cs) + 1)
    for r, c in chain[1:]:
        x, y = (c + 0.5) * cs, (r + 0.5) * cs
        if any(math.hypot(x - ox, y - oy) < clearance for ox, oy in others):
            return True
    return False


def oracle_policy(field: GeodesicField, pose: Pose, v_max: float = V_MAX, w_max: float = W_MAX,
                  dt: float = 1.0, others=(), arena: Arena | None = None, radius: float = AGENT_RADIUS,
                  success_radius: float = SUCCESS_RADIUS, parked=(), priority: bool = True) -> Action:
    """Shortest-path follower over the geodesic field.

    Aims at the farthest point of the steepest-descent chain that is reachable
    in a straight line through safe cells, turns in place when the heading
    error is large and otherwise drives with proportional heading correction.
    Speed is capped so a step never overshoots the aim point.

    Team-aware extras: ``parked`` agents (those that already stopped) are
    planned around as static obstacles. When a moving agent from ``others``
    sits on the path ahead, the agent with ``priority`` plans around it and
    the other one waits. With ``arena`` given, a command whose sweep would
    still run into someone is replaced by a greedy one-step detour.
    """
    def around(blockers, fallback):
        if not blockers:
            return fallback
        for margin in PARK_MARGINS:
            region = _region_field(field, tuple(blockers), radius, success_radius, margin)
            d = region.distance_at(pose.x, pose.y)
            if math.isfinite(d) and d > 0:
                return region
        return fallback

    base = around(parked, field)
    if arena is not None and field.distance_at(pose.x, pose.y) <= success_radius + v_max * dt:
        landing = _deep_landing(field, arena, pose, list(others) + list(parked), radius, v_max, w_max,
                                success_radius)
        if landing is not None:
            return landing
    near = [(ox, oy) for ox, oy in others if math.hypot(ox - pose.x, oy - pose.y) < 1.5]
    if near and _path_blocked(base, pose, near, radius):
        if not priority:
            return Action(0.0, 0.0)
        base = around(list(parked) + near, base)
    nominal = _follow(base, pose, v_max, w_max, dt, arena, radius)
    if arena is None or nominal.v == 0.0:
        return nominal
    close = [(ox, oy) for ox, oy in list(others) + list(parked)
             if math.hypot(ox - pose.x, oy - pose.y) < v_max * dt + 3 * radius]
    if not close:
        return nominal
    _, _, hit = _sweep(arena, pose, nominal.v * v_max, nominal.w * w_max, close, radius, 2 * radius + 0.04)
    if not hit:
        return nominal
    return _detour(base, arena, pose, close, radius, v_max, w_max)


def _escape_cell(field: GeodesicField, arena: Arena, pose: Pose, radius: float, reach: int = 5):
    """Best nearby cell reachable along a straight segment that never touches a wall."""
    d = field.distances
    cs = field.cell_size
    r0, c0 = int(math.floor(pose.y / cs)), int(math.floor(pose.x / cs))
    rows, cols = d.shape
    cands = []
    for r in range(max(r0 - reach, 0), min(r0 + reach + 1, rows)):
        for c in range(max(c0 - reach, 0), min(c0 + reach + 1, cols)):
            if np.isfinite(d[r, c]):
                x, y = (c + 0.5) * cs, (r + 0.5) * cs
                cands.append((d[r, c] + math.hypot(x - pose.x, y - pose.y), r, c, x, y))
    for _, r, c, x, y in sorted(cands):
        n = max(2, int(math.ceil(math.hypot(x - pose.x, y - pose.y) / 0.02)) + 1)
        if all(arena.clearance(px, py, reach=radius + 0.2) >= radius
               for px, py in zip(np.linspace(pose.x, x, n)[1:], np.linspace(pose.y, y, n)[1:])):
            return r, c
    return None


def _follow(field: GeodesicField, pose: Pose, v_max: float, w_max: float, dt: float,
            arena: Arena | None = None, radius: float = AGENT_RADIUS) -> Action:
    d_here = field.distance_at(pose.x, pose.y)
    if not math.isfinite(d_here):
        raise NotNavigableError("pose has no finite geodesic distance")
    if d_here == 0.0:
        return Action(0.0, 0.0)
    cs = field.cell_size
    chain = descent_chain(field, pose.x, pose.y)
    safe = _safe_mask(field)
    # prefer a far aim point with margin, then any straight navigable line,
    # then the centre of the nearest navigable cell
    target = None
    finite = np.isfinite(field.distances)
    for mask in (safe, finite):
        target = next((cell for cell in reversed(chain[1:])
                       if _visible(mask, cs, pose.x, pose.y, (cell[1] + 0.5) * cs, (cell[0] + 0.5) * cs)), None)
        if target is not None:
            break
    if target is None:
        target = _escape_cell(field, arena, pose, radius) if arena is not None else None
    if target is None:
        target = chain[0]
    tx, ty = (target[1] + 0.5) * cs, (target[0] + 0.5) * cs
    dist = math.hypot(tx - pose.x, ty - pose.y)
    if dist < 1e-9:
        return Action(0.0, 0.0)
    err = wrap_angle(math.atan2(ty - pose.y, tx - pose.x) - pose.o)
    w = max(-1.0, min(1.0, err / (w_max * dt)))
    if abs(err) > TURN_IN_PLACE:
        return Action(0.0, w)
    v = min(1.0, dist / (v_max * dt)) * math.cos(err)
    return Action(v, w)


def random_policy(rng: np.random.Generator) -> Action:
    v, w = rng.uniform(-1.0, 1.0, size=2)
    return Action(float(v), float(w))


def oracle_controller(world: WorldState, i: int) -> Action:
    me = world.agents[i]
    others = [(a.pose.x, a.pose.y) for j, a in enumerate(world.agents) if j != i and not a.frozen]
    parked = [(a.pose.x, a.pose.y) for j, a in enumerate(world.agents) if j != i and a.frozen]
    rank = (world.geodesic(i), i)
    priority = all(rank < (world.geodesic(j), j) for j, a in enumerate(world.agents)
                   if j != i and not a.frozen and math.hypot(a.pose.x - me.pose.x, a.pose.y - me.pose.y) < 1.5)
    return oracle_policy(world.fields[i], me.pose, me.v_max, me.w_max, others=others, arena=world.arena,
                         radius=me.radius, success_radius=world.success_radius, parked=parked, priority=priority)


def random_controller(rng: np.random.Generator):
    def ctrl(world: WorldState, i: int) -> Action:
        return random_policy(rng)
    return ctrl
