import pytest

from desknav.dataset import DatasetSpec, gen_dataset, generate_split, load_spec, load_split, task_family


def test_default_train_count():
    spec = DatasetSpec()
    assert spec.arenas["train"] * len(spec.difficulties) * spec.episodes_per_bin["train"] == 3750


def test_regeneration_is_byte_identical(tmp_path, tiny_spec):
    gen_dataset(tiny_spec, tmp_path / "a")
    gen_dataset(tiny_spec, tmp_path / "b")
    for f in ("train.jsonl", "val.jsonl", "test.jsonl", "dataset.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_roundtrip_through_disk(tmp_path, tiny_spec, tiny_splits):
    gen_dataset(tiny_spec, tmp_path)
    assert load_spec(tmp_path) == tiny_spec
    back = load_split(tmp_path, "test")
    assert [e.to_jsonl() for e in back.episodes] == [e.to_jsonl() for e in tiny_splits["test"].episodes]
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path, "bogus")


def test_stratification(tiny_spec, tiny_splits):
    sp = tiny_splits["test"]
    for d in tiny_spec.difficulties:
        assert len(sp.by_difficulty(d)) == tiny_spec.arenas["test"] * tiny_spec.episodes_per_bin["test"]


def test_splits_use_distinct_arenas(tiny_splits):
    digests = {s: {a.digest() for a in sp.arenas.values()} for s, sp in tiny_splits.items()}
    assert not digests["train"] & digests["test"]


def test_adhoc_team_sizes():
    spec = DatasetSpec.adhoc(2, 3, arenas={"train": 1, "val": 1, "test": 1},
                             episodes_per_bin={"train": 2, "val": 1, "test": 2})
    assert all(e.n_agents == 2 and e.task == "CommonGoal" for e in generate_split(spec, "train").episodes)
    assert all(e.n_agents == 3 for e in generate_split(spec, "test").episodes)
    with pytest.raises(ValueError):
        DatasetSpec.adhoc(2, 2)


def test_task_aliases():
    assert task_family("specific") == "SpecificGoal"
    with pytest.raises(ValueError):
        task_family("teamwork")
