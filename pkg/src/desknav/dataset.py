"""Reproducible train/val/test splits of arenas and team episodes on disk.

Layout of a dataset directory::

    dataset.json            the generating DatasetSpec
    arenas/<arena_id>.json  occupancy grids
    <split>.jsonl           one EpisodeSpec per line
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scene import (
    DIFFICULTY_BINS,
    Arena,
    ArenaStyle,
    EpisodeSpec,
    PlacementError,
    Task,
    generate_arena,
    safe_init,
)

SPLITS = ("train", "val", "test")
TASK_FAMILIES = ("CommonGoal", "SpecificGoal", "AdHoc")
_TASK_ALIASES = {"common": "CommonGoal", "specific": "SpecificGoal", "adhoc": "AdHoc"}


def task_family(name: str) -> str:
    name = _TASK_ALIASES.get(name.lower(), name) if isinstance(name, str) else name
    if name not in TASK_FAMILIES:
        raise ValueError(f"unknown task family {name!r}")
    return name


@dataclass
class DatasetSpec:
    task: str = "CommonGoal"
    team_sizes: dict[str, int] = field(default_factory=lambda: {"train": 2, "val": 2, "test": 2})
    arenas: dict[str, int] = field(default_factory=lambda: {"train": 25, "val": 5, "test": 5})
    episodes_per_bin: dict[str, int] = field(default_factory=lambda: {"train": 50, "val": 10, "test": 20})
    seed: int = 0
    arena_size: tuple[float, float] = (10.0, 15.0)
    style: str = "rooms"
    difficulties: tuple[str, ...] = tuple(DIFFICULTY_BINS)

    def __post_init__(self):
        self.task = task_family(self.task)
        self.arena_size = tuple(self.arena_size)
        self.difficulties = tuple(self.difficulties)
        for split in SPLITS:
            if self.team_sizes.get(split, 0) < 1:
                raise ValueError(f"team size for {split} must be >= 1")
        if self.task == "AdHoc" and self.team_sizes["train"] == self.team_sizes["test"]:
            raise ValueError("AdHoc needs a train team size different from the evaluation team size")
        for d in self.difficulties:
            if d not in DIFFICULTY_BINS:
                raise ValueError(f"unknown difficulty {d!r}")

    @classmethod
    def adhoc(cls, train_n: int, eval_n: int, **kwargs) -> "DatasetSpec":
        return cls(task="AdHoc", team_sizes={"train": train_n, "val": eval_n, "test": eval_n}, **kwargs)

    @classmethod
    def uniform(cls, task: str = "CommonGoal", n: int = 2, **kwargs) -> "DatasetSpec":
        return cls(task=task, team_sizes={s: n for s in SPLITS}, **kwargs)

    def episode_task(self, split: str) -> str:
        # AdHoc reuses CommonGoal placement; only the team size changes per split
        return Task.COMMON.value if self.task in ("CommonGoal", "AdHoc") else Task.SPECIFIC.value

    def arena_style(self) -> ArenaStyle:
        if self.style == "empty":
            return ArenaStyle.empty()
        if self.style == "rooms":
            return ArenaStyle()
        raise ValueError(f"unknown arena style {self.style!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["arena_size"] = list(self.arena_size)
        d["difficulties"] = list(self.difficulties)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Split:
    name: str
    arenas: dict[str, Arena]
    episodes: list[EpisodeSpec]

    def jobs(self, indices=None) -> list[tuple[Arena, EpisodeSpec, None]]:
        idx = range(len(self.episodes)) if indices is None else indices
        return [(self.arenas[self.episodes[i].arena_id], self.episodes[i], None) for i in idx]

    def by_difficulty(self, difficulty: str) -> list[int]:
        return [i for i, e in enumerate(self.episodes) if e.difficulty == difficulty]


def _arena_seed(seed: int, split_idx: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, split_idx, j]).generate_state(1)[0])


def generate_split(spec: DatasetSpec, split: str) -> Split:
    s_idx = SPLITS.index(split)
    n_agents = spec.team_sizes[split]
    style = spec.arena_style()
    lo, hi = spec.arena_size
    arenas: dict[str, Arena] = {}
    episodes: list[EpisodeSpec] = []
    for j in range(spec.arenas[split]):
        a_seed = _arena_seed(spec.seed, s_idx, j)
        size_rng = np.random.default_rng([a_seed, 1])
        w = round(float(size_rng.uniform(lo, hi)), 1)
        h = round(float(size_rng.uniform(lo, hi)), 1)
        arena = generate_arena(a_seed, w, h, style)
        arenas[arena.id] = arena
        for b, diff in enumerate(spec.difficulties):
            for e in range(spec.episodes_per_bin[split]):
                ep_seed = int(np.random.SeedSequence([spec.seed, s_idx, j, b, e]).generate_state(1)[0])
                rng = np.random.default_rng(ep_seed)
                try:
                    ep = safe_init(arena, n_agents, diff, spec.episode_task(split), rng, seed=ep_seed)
                except PlacementError as exc:
                    raise PlacementError(f"{split} arena {arena.id} bin {diff}: {exc}") from exc
                episodes.append(ep)
    return Split(split, arenas, episodes)


def gen_dataset(spec: DatasetSpec, out_dir, splits=SPLITS) -> dict[str, Split]:
    """Generate every split and write it under ``out_dir``; returns the splits."""
    out = Path(out_dir)
    (out / "arenas").mkdir(parents=True, exist_ok=True)
    with open(out / "dataset.json", "w") as fh:
        json.dump(spec.to_json(), fh, indent=2, sort_keys=True)
    result = {}
    for split in splits:
        sp = generate_split(spec, split)
        for aid, arena in sp.arenas.items():
            with open(out / "arenas" / f"{aid}.json", "w") as fh:
                json.dump(arena.to_json(), fh, separators=(",", ":"), sort_keys=True)
        with open(out / f"{split}.jsonl", "w") as fh:
            for ep in sp.episodes:
                fh.write(ep.to_jsonl() + "\n")
        result[split] = sp
    return result


def load_spec(data_dir) -> DatasetSpec:
    with open(Path(data_dir) / "dataset.json") as fh:
        return DatasetSpec.from_json(json.load(fh))


def load_split(data_dir, split: str) -> Split:
    d = Path(data_dir)
    path = d / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"split {split!r} not found in {d}")
    with open(path) as fh:
        episodes = [EpisodeSpec.from_json(json.loads(line)) for line in fh if line.strip()]
    arenas = {}
    for ep in episodes:
        if ep.arena_id not in arenas:
            with open(d / "arenas" / f"{ep.arena_id}.json") as fh:
                arenas[ep.arena_id] = Arena.from_json(json.load(fh))
    return Split(split, arenas, episodes)
