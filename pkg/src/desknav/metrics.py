"""Episode logs and the four team navigation metrics (SR, DTS, SPL, SSR)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .scene import DIFFICULTY_BINS

SUCCESS_DISTANCE = 1.0
METRIC_COLUMNS = ("SR", "DTS", "SSR", "SPL")


@dataclass
class AgentSummary:
    steps_used: int
    path_length: float
    final_geodesic: float
    initial_geodesic: float
    succeeded: bool


@dataclass
class TrajectoryLog:
    episode: dict
    steps: list[dict] = field(default_factory=list)
    agents: list[AgentSummary] = field(default_factory=list)
    comm: list[dict] = field(default_factory=list)

    @property
    def difficulty(self) -> str:
        return self.episode.get("difficulty", "unknown")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def to_json(self) -> dict:
        return {
            "episode": self.episode,
            "steps": self.steps,
            "agents": [asdict(a) for a in self.agents],
            "comm": self.comm,
        }

    def to_jsonl(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_json(cls, d: dict) -> "TrajectoryLog":
        return cls(d["episode"], d.get("steps", []), [AgentSummary(**a) for a in d["agents"]], d.get("comm", []))


class TrajectoryRecorder:
    """Accumulates per-step records and terminal per-agent statistics."""

    def __init__(self, episode: dict, start_xy: list[tuple[float, float]], initial_geodesic: list[float],
                 horizon: int):
        self.log = TrajectoryLog(episode)
        self.horizon = horizon
        self.prev = list(start_xy)
        self.path = [0.0] * len(start_xy)
        self.success_step: list[int | None] = [None] * len(start_xy)
        self.initial = list(initial_geodesic)

    def record(self, t: int, poses, actions, collided, succeeded, comm_entry: dict | None = None) -> None:
        for i, p in enumerate(poses):
            if self.success_step[i] is None:
                self.path[i] += math.hypot(p[0] - self.prev[i][0], p[1] - self.prev[i][1])
                if succeeded[i]:
                    self.success_step[i] = t
            self.prev[i] = (p[0], p[1])
        self.log.steps.append({
            "t": t,
            "poses": [list(map(float, p)) for p in poses],
            "actions": [[float(a[0]), float(a[1])] for a in actions],
            "collided": [bool(c) for c in collided],
            "succeeded": [bool(s) for s in succeeded],
        })
        if comm_entry is not None:
            self.log.comm.append(comm_entry)

    def finish(self, final_geodesic: list[float]) -> TrajectoryLog:
        self.log.agents = [
            AgentSummary(
                steps_used=s if s is not None else self.horizon,
                path_length=self.path[i],
                final_geodesic=float(final_geodesic[i]),
                initial_geodesic=float(self.initial[i]),
                succeeded=s is not None,
            )
            for i, s in enumerate(self.success_step)
        ]
        return self.log


@dataclass
class MetricsReport:
    rows: dict[str, dict[str, float]]
    counts: dict[str, int]
    n_agents: list[int]
    horizon: int

    def __getitem__(self, key: str) -> dict[str, float]:
        return self.rows[key]

    @property
    def overall(self) -> dict[str, float]:
        return self.rows["overall"]

    def to_json(self) -> dict:
        return {"rows": self.rows, "counts": self.counts, "n_agents": self.n_agents, "horizon": self.horizon}

    def write(self, json_path=None, csv_path=None) -> None:
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.to_json(), fh, indent=2, sort_keys=True)
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin", "episodes", *METRIC_COLUMNS])
                for name, row in self.rows.items():
                    w.writerow([name, self.counts[name], *(f"{row[c]:.6f}" for c in METRIC_COLUMNS)])

    def format_table(self) -> str:
        lines = [f"{'bin':<8} {'K':>5} " + " ".join(f"{c:>8}" for c in METRIC_COLUMNS)]
        for name, row in self.rows.items():
            lines.append(f"{name:<8} {self.counts[name]:>5} " + " ".join(f"{row[c]:>8.4f}" for c in METRIC_COLUMNS))
        return "\n".join(lines)


def _terms(log: TrajectoryLog, horizon: int, success_distance: float) -> np.ndarray:
    out = []
    for a in log.agents:
        hit = 1.0 if a.succeeded else 0.0
        dts = max(0.0, a.final_geodesic - success_distance)
        spl = hit * a.initial_geodesic / max(a.initial_geodesic, a.path_length) if hit else 0.0
        ssr = hit * horizon / min(horizon, a.steps_used) if hit else 0.0
        out.append((hit, dts, ssr, spl))
    return np.asarray(out, dtype=float).reshape(-1, 4)


def compute_metrics(logs: list[TrajectoryLog], horizon: int = 80,
                    success_distance: float = SUCCESS_DISTANCE) -> MetricsReport:
    """Per-difficulty and overall SR, DTS, SSR and SPL.

    Every (episode, agent) pair is one term; a bin averages over its terms,
    so "overall" is episode-weighted. DTS is clamped at zero per agent.
    """
    if not logs:
        raise ValueError("no trajectory logs to score")
    groups: dict[str, list[np.ndarray]] = {}
    episodes: dict[str, int] = {}
    for log in logs:
        t = _terms(log, horizon, success_distance)
        for key in (log.difficulty, "overall"):
            groups.setdefault(key, []).append(t)
            episodes[key] = episodes.get(key, 0) + 1
    order = [b for b in DIFFICULTY_BINS if b in groups]
    order += sorted(k for k in groups if k not in DIFFICULTY_BINS and k != "overall") + ["overall"]
    rows, counts = {}, {}
    for key in order:
        stacked = np.concatenate(groups[key], axis=0)
        means = stacked.mean(axis=0) if stacked.size else np.zeros(4)
        rows[key] = dict(zip(METRIC_COLUMNS, map(float, means)))
        counts[key] = episodes[key]
    return MetricsReport(rows, counts, sorted({log.n_agents for log in logs}), horizon)
