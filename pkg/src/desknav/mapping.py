"""Egocentric map building from panoramic ray observations.

The map frame is anchored at the agent's start pose: the start position is
the map centre and the start heading is the +x axis. The frame never rotates
with the agent afterwards.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .scene import AGENT_RADIUS, CELL_SIZE, R_MAX, Pose
from .sim import HIT_WALL, Observation

MAP_EXTENT = 38.4
FEATURE_CELL = 3.0
N_FEATURES = 8
OBSTACLE_RATE = 0.3
WINDOW = 5
STATS_HALF = 3.0  # metres, half-width of the local statistics window
SUMMARY_SIZE = N_FEATURES * WINDOW * WINDOW + 4


class MapOverflowError(ValueError):
    pass


@dataclass(eq=False)
class EgoMap:
    feature_grid: np.ndarray   # (C, Lf, Lf)
    obstacle_prob: np.ndarray  # (L, L)
    explored: np.ndarray       # (L, L) bool
    trajectory: np.ndarray     # (L, L) bool
    current_loc: np.ndarray    # (L, L) bool
    origin_pose: Pose | None = None
    cell_size: float = CELL_SIZE
    feature_cell: float = FEATURE_CELL

    @property
    def size(self) -> int:
        return self.obstacle_prob.shape[0]

    def copy(self) -> "EgoMap":
        return EgoMap(self.feature_grid.copy(), self.obstacle_prob.copy(), self.explored.copy(),
                      self.trajectory.copy(), self.current_loc.copy(), self.origin_pose,
                      self.cell_size, self.feature_cell)

    def to_local(self, x: float, y: float) -> tuple[float, float]:
        """World point into the start-anchored map frame (metres)."""
        p0 = self.origin_pose or Pose(0.0, 0.0, 0.0)
        dx, dy = x - p0.x, y - p0.y
        c, s = math.cos(p0.o), math.sin(p0.o)
        return c * dx + s * dy, -s * dx + c * dy

    def local_heading(self, o: float) -> float:
        p0 = self.origin_pose or Pose(0.0, 0.0, 0.0)
        return o - p0.o

    def to_json(self) -> dict:
        return {
            "origin_pose": list(self.origin_pose.as_tuple()) if self.origin_pose else None,
            "cell_size": self.cell_size,
            "feature_cell": self.feature_cell,
            "feature_grid": self.feature_grid.tolist(),
            "obstacle_prob": self.obstacle_prob.tolist(),
            "explored": self.explored.astype(int).tolist(),
            "trajectory": self.trajectory.astype(int).tolist(),
            "current_loc": self.current_loc.astype(int).tolist(),
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def init_map(extent: float = MAP_EXTENT, cell_size: float = CELL_SIZE, n_features: int = N_FEATURES,
             feature_cell: float = FEATURE_CELL) -> EgoMap:
    size = int(round(extent / cell_size))
    size_f = int(math.ceil(extent / feature_cell))
    return EgoMap(
        feature_grid=np.zeros((n_features, size_f, size_f)),
        obstacle_prob=np.zeros((size, size)),
        explored=np.zeros((size, size), dtype=bool),
        trajectory=np.zeros((size, size), dtype=bool),
        current_loc=np.zeros((size, size), dtype=bool),
        cell_size=cell_size,
        feature_cell=feature_cell,
    )


def _cells(m: EgoMap, lx: np.ndarray, ly: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    half = m.size // 2
    col = np.floor(lx / m.cell_size).astype(np.int64) + half
    row = np.floor(ly / m.cell_size).astype(np.int64) + half
    inside = (row >= 0) & (row < m.size) & (col >= 0) & (col < m.size)
    return row, col, inside


def footprint(m: EgoMap, lx: float, ly: float, radius: float = AGENT_RADIUS) -> tuple[np.ndarray, np.ndarray]:
    """Map cells whose centre lies inside the agent disc."""
    half = m.size // 2
    cs = m.cell_size
    k = int(math.ceil(radius / cs)) + 1
    c0 = int(math.floor(lx / cs)) + half
    r0 = int(math.floor(ly / cs)) + half
    rr, cc = np.mgrid[r0 - k:r0 + k + 1, c0 - k:c0 + k + 1]
    cx = (cc - half + 0.5) * cs
    cy = (rr - half + 0.5) * cs
    keep = (cx - lx) ** 2 + (cy - ly) ** 2 <= radius * radius
    rr, cc = rr[keep], cc[keep]
    if rr.size == 0 or rr.min() < 0 or cc.min() < 0 or rr.max() >= m.size or cc.max() >= m.size:
        raise MapOverflowError("map overflow")
    return rr, cc


def _sector_means(depth: np.ndarray, n_sectors: int) -> np.ndarray:
    k = depth.shape[0]
    edges = np.linspace(0, k, n_sectors + 1).round().astype(int)
    return np.array([depth[edges[i]:edges[i + 1]].mean() for i in range(n_sectors)])


def update_map(m: EgoMap, obs: Observation, pose_prev: Pose, pose_cur: Pose,
               alpha: float = OBSTACLE_RATE, r_max: float = R_MAX, radius: float = AGENT_RADIUS) -> EgoMap:
    """Fold one panoramic observation into the map (in place; also returned).

    Free space seen along each ray pulls the obstacle belief toward 0 and a
    wall hit pulls its cell toward 1, by ``p <- (1 - alpha) p + alpha target``.
    A cell touched by both a free segment and a hit counts as a hit.
    """
    if m.origin_pose is None:
        m.origin_pose = pose_prev
    lx, ly = m.to_local(pose_cur.x, pose_cur.y)
    fr, fc = footprint(m, lx, ly, radius)
    heading = m.local_heading(pose_cur.o)
    k = obs.n_rays
    angles = heading + 2.0 * math.pi * np.arange(k) / k
    dist = obs.depth * r_max
    dx, dy = np.cos(angles), np.sin(angles)

    step = 0.5 * m.cell_size
    ts = np.arange(0.0, r_max, step)
    free_mask = ts[None, :] <= (dist[:, None] - 0.5 * m.cell_size)
    px = lx + dx[:, None] * ts[None, :]
    py = ly + dy[:, None] * ts[None, :]
    r, c, inside = _cells(m, px[free_mask], py[free_mask])
    free_idx = np.unique(r[inside] * m.size + c[inside])

    is_wall = obs.hit_type[:, HIT_WALL] > 0.5
    hx = lx + dx[is_wall] * (dist[is_wall] + 0.25 * m.cell_size)
    hy = ly + dy[is_wall] * (dist[is_wall] + 0.25 * m.cell_size)
    r, c, inside = _cells(m, hx, hy)
    hit_idx = np.unique(r[inside] * m.size + c[inside])
    free_idx = np.setdiff1d(free_idx, hit_idx, assume_unique=True)

    prob = m.obstacle_prob.reshape(-1)
    prob[free_idx] = (1.0 - alpha) * prob[free_idx]
    prob[hit_idx] = (1.0 - alpha) * prob[hit_idx] + alpha
    np.clip(prob, 0.0, 1.0, out=prob)

    explored = m.explored.reshape(-1)
    explored[free_idx] = True
    explored[hit_idx] = True

    # trajectory gets both footprints and the straight segment between them
    px0, py0 = m.to_local(pose_prev.x, pose_prev.y)
    pr, pc = footprint(m, px0, py0, radius)
    seg_len = math.hypot(lx - px0, ly - py0)
    n_seg = max(2, int(math.ceil(seg_len / step)) + 1)
    sx = np.linspace(px0, lx, n_seg)
    sy = np.linspace(py0, ly, n_seg)
    sr, sc, s_in = _cells(m, sx, sy)
    m.trajectory[pr, pc] = True
    m.trajectory[fr, fc] = True
    m.trajectory[sr[s_in], sc[s_in]] = True
    m.explored |= m.trajectory

    m.current_loc[:] = False
    m.current_loc[fr, fc] = True

    nf = m.feature_grid.shape[1]
    fi = int(math.floor(ly / m.feature_cell + nf / 2))
    fj = int(math.floor(lx / m.feature_cell + nf / 2))
    if 0 <= fi < nf and 0 <= fj < nf:
        m.feature_grid[:, fi, fj] = _sector_means(obs.depth, m.feature_grid.shape[0])
    return m


def map_summary(m: EgoMap, pose: Pose) -> np.ndarray:
    """Fixed-length digest: a 5x5 coarse feature window around the pose plus
    four occupancy statistics (local obstacle mean, local explored fraction,
    local trajectory fraction, global explored fraction)."""
    nf = m.feature_grid.shape[1]
    c_feat = m.feature_grid.shape[0]
    if m.origin_pose is None:
        lx, ly = 0.0, 0.0
    else:
        lx, ly = m.to_local(pose.x, pose.y)
    fi = int(math.floor(ly / m.feature_cell + nf / 2))
    fj = int(math.floor(lx / m.feature_cell + nf / 2))
    h = WINDOW // 2
    window = np.zeros((c_feat, WINDOW, WINDOW))
    for a in range(WINDOW):
        for b in range(WINDOW):
            i, j = fi - h + a, fj - h + b
            if 0 <= i < nf and 0 <= j < nf:
                window[:, a, b] = m.feature_grid[:, i, j]
    half = m.size // 2
    k = int(round(STATS_HALF / m.cell_size))
    r = int(math.floor(ly / m.cell_size)) + half
    c = int(math.floor(lx / m.cell_size)) + half
    r0, r1 = max(r - k, 0), min(r + k, m.size)
    c0, c1 = max(c - k, 0), min(c + k, m.size)
    area = float((2 * k) ** 2)
    stats = np.array([
        m.obstacle_prob[r0:r1, c0:c1].sum() / area,
        m.explored[r0:r1, c0:c1].sum() / area,
        m.trajectory[r0:r1, c0:c1].sum() / area,
        m.explored.mean(),
    ])
    return np.concatenate([window.ravel(), stats])
