import heapq
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from desknav.scene import (
    AGENT_RADIUS, DIFFICULTY_BINS, Arena, EpisodeSpec, NotNavigableError, PlacementError, Pose, Task,
    arena_from_grid, cast_rays, compute_geodesic_field, generate_arena, navigable_mask, safe_init, wrap_angle,
)

from conftest import open_arena


def heap_dijkstra(mask, cs, start, knight=True):
    """Plain priority-queue Dijkstra used as an independent reference."""
    rows, cols = mask.shape
    moves = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    if knight:
        moves += [(a * 2, b) for a in (-1, 1) for b in (-1, 1)] + [(a, b * 2) for a in (-1, 1) for b in (-1, 1)]
    dist = np.full(mask.shape, np.inf)
    dist[start] = 0.0
    pq = [(0.0, start)]
    while pq:
        d, (r, c) = heapq.heappop(pq)
        if d > dist[r, c]:
            continue
        for dr, dc in moves:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < rows and 0 <= nc < cols) or not mask[nr, nc]:
                continue
            if abs(dr) + abs(dc) == 3:
                # both cells the knight move crosses must be free
                if abs(dr) == 2:
                    mids = [(r + dr // 2, c), (r + dr // 2, c + dc)]
                else:
                    mids = [(r, c + dc // 2), (r + dr, c + dc // 2)]
                if not all(mask[m] for m in mids):
                    continue
            nd = d + cs * math.hypot(dr, dc)
            if nd < dist[nr, nc]:
                dist[nr, nc] = nd
                heapq.heappush(pq, (nd, (nr, nc)))
    return dist


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_geodesic_matches_heap_dijkstra(seed):
    arena = generate_arena(seed, 10.0, 10.0)
    mask = navigable_mask(arena)
    free = np.argwhere(mask)
    rng = np.random.default_rng(seed)
    r, c = free[rng.integers(len(free))]
    goal = Pose(*arena.cell_center(int(r), int(c)), 0.0)
    field = compute_geodesic_field(arena, goal)
    ref = heap_dijkstra(mask, arena.cell_size, (int(r), int(c)))
    assert np.array_equal(np.isfinite(field.distances), np.isfinite(ref))
    fin = np.isfinite(ref)
    np.testing.assert_allclose(field.distances[fin], ref[fin], rtol=0, atol=1e-9)


def test_open_floor_geodesic_close_to_euclidean():
    arena = open_arena(80, 80)
    goal = Pose(4.05, 4.05, 0.0)
    field = compute_geodesic_field(arena, goal)
    for x, y in [(1.05, 1.05), (7.05, 2.05), (2.55, 6.95)]:
        e = math.hypot(x - goal.x, y - goal.y)
        assert e <= field.distance_at(x, y) <= 1.03 * e + 1e-9


def test_geodesic_detours_around_a_wall():
    occ = np.zeros((40, 40), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    occ[:30, 20] = True  # wall from the bottom, gap at the top
    arena = arena_from_grid(occ, 0.1)
    field = compute_geodesic_field(arena, Pose(3.05, 0.55, 0.0))
    d = field.distance_at(1.05, 0.55)
    assert d > 2 * (3.0 - 0.55 + 0.18)  # has to climb past the wall end


def test_goal_in_obstacle_raises():
    arena = open_arena()
    with pytest.raises(NotNavigableError):
        compute_geodesic_field(arena, Pose(0.05, 0.05, 0.0))


def test_arena_generation_is_deterministic():
    a, b = generate_arena(7, 10.0, 12.0), generate_arena(7, 10.0, 12.0)
    assert a.digest() == b.digest()
    assert generate_arena(8, 10.0, 12.0).digest() != a.digest()


def test_arena_json_roundtrip():
    a = generate_arena(3, 10.0, 11.0)
    b = Arena.from_json(a.to_json())
    assert np.array_equal(a.occupancy, b.occupancy) and a.digest() == b.digest()


def test_cast_rays_exact_against_axis_walls():
    arena = open_arena(60, 60)
    # inner wall faces are at 0.1 and 5.9
    d = cast_rays(arena, 2.0, 3.0, np.array([0.0, math.pi / 2, math.pi, -math.pi / 2]))
    np.testing.assert_allclose(d, [3.9, 2.9, 1.9, 2.9], atol=1e-9)


def test_cast_rays_clipped_at_max_range():
    arena = open_arena(60, 60)
    assert cast_rays(arena, 2.0, 3.0, np.array([0.0]), r_max=1.0)[0] == 1.0


@pytest.mark.parametrize("difficulty", list(DIFFICULTY_BINS))
@pytest.mark.parametrize("task", [Task.COMMON, Task.SPECIFIC])
def test_safe_init_respects_bin_and_clearance(difficulty, task):
    arena = generate_arena(11, 12.0, 12.0)
    ep = safe_init(arena, 3, difficulty, task, np.random.default_rng(5))
    lo, hi = DIFFICULTY_BINS[difficulty]
    assert all(lo <= d <= hi for d in ep.start_geodesic)
    for i, s in enumerate(ep.starts):
        assert arena.disc_free(s.x, s.y, AGENT_RADIUS)
        for t in ep.starts[i + 1:]:
            assert math.hypot(s.x - t.x, s.y - t.y) >= 2 * AGENT_RADIUS + 0.05 - 1e-12
    if task is Task.COMMON:
        assert len({(g.x, g.y) for g in ep.goals}) == 1


def test_safe_init_gives_up_when_bin_unreachable():
    arena = open_arena(20, 20)  # 2 m box: no start can be 5 m away
    with pytest.raises(PlacementError):
        safe_init(arena, 1, "hard", "CommonGoal", np.random.default_rng(0), max_attempts=200)


def test_episode_json_roundtrip():
    arena = generate_arena(2, 10.0, 10.0)
    ep = safe_init(arena, 2, "easy", "SpecificGoal", np.random.default_rng(1), seed=99)
    back = EpisodeSpec.from_json(ep.to_json())
    assert back.to_jsonl() == ep.to_jsonl()


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi <= w < math.pi or math.isclose(w, math.pi)
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
