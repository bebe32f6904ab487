import math

import numpy as np

from desknav.mapping import SUMMARY_SIZE, init_map, map_summary, update_map
from desknav.scene import EpisodeSpec, GoalSignature, Pose
from desknav.sim import Action, make_world, observe, step

from conftest import open_arena


def world():
    arena = open_arena(60, 60)
    ep = EpisodeSpec(arena.id, 1, [Pose(3.0, 3.0, 0.7)], [Pose(5.0, 5.0, 0.0)], [GoalSignature(np.zeros(72))],
                     "easy", "CommonGoal", 0)
    return make_world(arena, ep)


def test_first_update_anchors_frame_at_start():
    w = world()
    m = init_map()
    p = w.agents[0].pose
    update_map(m, observe(w, 0), p, p)
    assert m.origin_pose == p
    assert m.to_local(p.x, p.y) == (0.0, 0.0)
    half = m.size // 2
    assert m.current_loc[half, half] and m.trajectory[half, half]


def test_walls_raise_belief_and_free_space_lowers_it():
    w = world()
    m = init_map()
    p = w.agents[0].pose
    for _ in range(5):
        update_map(m, observe(w, 0), p, p)
    assert m.obstacle_prob.max() > 0.8
    # the west wall inner face is 2.9 m away along the start frame direction pi - 0.7
    lx, ly = m.to_local(0.05, 3.0)
    r = int(math.floor(ly / m.cell_size)) + m.size // 2
    c = int(math.floor(lx / m.cell_size)) + m.size // 2
    assert m.obstacle_prob[r - 1:r + 2, c - 1:c + 2].max() > 0.8
    assert 0.0 <= m.obstacle_prob.min() and m.obstacle_prob.max() <= 1.0
    assert (m.obstacle_prob[~m.explored] == 0).all()


def test_trajectory_covers_path():
    w = world()
    m = init_map()
    prev = w.agents[0].pose
    update_map(m, observe(w, 0), prev, prev)
    for _ in range(3):
        w, _ = step(w, [Action(1.0, 0.0)])
        cur = w.agents[0].pose
        update_map(m, observe(w, 0), prev, cur)
        prev = cur
    assert m.trajectory.sum() > 0
    assert (m.explored | ~m.trajectory).all()
    assert m.current_loc.sum() < m.trajectory.sum()


def test_summary_shape_and_empty_map():
    m = init_map()
    s = map_summary(m, Pose(0.0, 0.0, 0.0))
    assert s.shape == (SUMMARY_SIZE,) and not s.any()
    w = world()
    p = w.agents[0].pose
    update_map(m, observe(w, 0), p, p)
    s = map_summary(m, p)
    assert s.shape == (SUMMARY_SIZE,) and np.isfinite(s).all() and s.any()
