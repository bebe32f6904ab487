import json

import pytest

from desknav.cli import main
from desknav.learn import TrainConfig


def test_print_config(capsys):
    assert main(["--print-config"]) == 0
    assert TrainConfig.from_json(json.loads(capsys.readouterr().out)) == TrainConfig()


def test_gen_train_eval_replay(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen", "--task", "adhoc", "--n", "2", "--eval-n", "3", "--out", str(data), "--seed", "1",
                 "--arenas", "1,1,1", "--episodes", "2,1,1"]) == 0
    assert "test: 1 arenas, 3 episodes, N=3" in capsys.readouterr().out
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"updates": 1, "parallel_envs": 2, "ppo_epochs": 1, "horizon": 10,
                               "probe_episodes": 2}))
    run = tmp_path / "run"
    assert main(["train", "--method", "memory", "--data", str(data), "--config", str(cfg), "--out", str(run)]) == 0
    assert (run / "policy.ckpt").exists() and (run / "curve.csv").exists()
    ev = tmp_path / "ev"
    assert main(["eval", "--ckpt", str(run / "policy.ckpt"), "--split", "test", "--out", str(ev)]) == 0
    rep = json.loads((ev / "report.json").read_text())
    assert rep["n_agents"] == [3] and set(rep["rows"]) == {"easy", "medium", "hard", "overall"}
    svg = tmp_path / "ep.svg"
    assert main(["replay", "--log", str(ev / "logs.jsonl"), "--svg", str(svg), "--data", str(data)]) == 0
    text = svg.read_text()
    assert text.startswith("<svg") and text.count("<polyline") == 3


def test_train_generates_missing_dataset(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"updates": 0, "probe_episodes": 1}))
    assert main(["train", "--method", "il", "--task", "specific", "--arenas", "1,1,1", "--episodes", "1,1,1",
                 "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "data" / "dataset.json").exists()


def test_eval_baseline_needs_data(tmp_path):
    with pytest.raises(SystemExit):
        main(["eval", "--ckpt", "random"])


def test_bad_config_field(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"updatez": 3}))
    with pytest.raises(ValueError):
        main(["train", "--method", "ippo", "--config", str(cfg), "--out", str(tmp_path / "r")])
