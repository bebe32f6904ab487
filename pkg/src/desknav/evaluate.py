"""Deterministic evaluation of checkpoints and baselines on a dataset split."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import oracle_controller, random_controller
from .comm import CommMode
from .dataset import Split
from .metrics import MetricsReport, TrajectoryLog, compute_metrics
from .policy import NavPolicy, load_checkpoint
from .rollout import run_baseline_episode, run_policy_episodes

BASELINES = ("oracle", "random")


@dataclass
class EvalResult:
    report: MetricsReport
    logs: list[TrajectoryLog]
    comm_scalars: int


def _resolve(agent, mode):
    """Turn a checkpoint path, policy or baseline name into (policy|name, mode)."""
    if isinstance(agent, NavPolicy):
        return agent, CommMode(mode or CommMode.NONE)
    if isinstance(agent, str) and agent in BASELINES:
        return agent, CommMode.NONE
    policy, header = load_checkpoint(agent)
    return policy, CommMode(mode or header.get("comm_mode", CommMode.NONE.value))


def eval_policy(agent, split: Split, out_dir=None, mode: CommMode | str | None = None, horizon: int = 80,
                seed: int = 0, batch_size: int = 64, write_logs: bool = True) -> EvalResult:
    """Score ``agent`` on every episode of ``split``.

    ``agent`` is a checkpoint path, a :class:`NavPolicy` or one of the
    baseline names. Policies act on their mean action; the random baseline
    draws from an rng seeded by ``seed``, so repeated runs are identical.
    Team size and the gating threshold follow each episode, so a checkpoint
    trained with one team size runs unchanged on another.
    """
    actor, mode = _resolve(agent, mode)
    indices = list(range(len(split.episodes)))
    logs: list[TrajectoryLog] = []
    scalars = 0
    if isinstance(actor, str):
        ctrl = oracle_controller if actor == "oracle" else random_controller(np.random.default_rng(seed))
        for i, (arena, ep, fields) in zip(indices, split.jobs(indices)):
            logs.append(run_baseline_episode(arena, ep, ctrl, fields, horizon=horizon, index=i).log)
    else:
        for lo in range(0, len(indices), batch_size):
            chunk = indices[lo:lo + batch_size]
            results = run_policy_episodes(actor, split.jobs(chunk), mode, "deterministic", horizon=horizon,
                                          record=False, indices=chunk)
            logs.extend(r.log for r in results)
            scalars += sum(r.comm_scalars for r in results)
    report = compute_metrics(logs, horizon)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "report.json", out / "report.csv")
        if write_logs:
            with open(out / "logs.jsonl", "w") as fh:
                for log in logs:
                    fh.write(log.to_jsonl() + "\n")
        with open(out / "eval.json", "w") as fh:
            json.dump({"split": split.name, "episodes": len(logs), "comm_mode": mode.value,
                       "comm_scalars": scalars, "horizon": horizon}, fh, indent=2, sort_keys=True)
    return EvalResult(report, logs, scalars)


def load_logs(path) -> list[TrajectoryLog]:
    with open(path) as fh:
        return [TrajectoryLog.from_json(json.loads(line)) for line in fh if line.strip()]
