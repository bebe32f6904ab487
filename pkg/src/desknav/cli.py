"""Command line entry point: ``desknav {gen,train,eval,replay}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset import SPLITS, DatasetSpec, gen_dataset, load_spec, load_split, task_family
from .evaluate import BASELINES, eval_policy, load_logs
from .learn import Method, TrainConfig, bc_train, train_run
from .policy import read_checkpoint_header
from .replay import write_svg


def _triple(text: str) -> dict[str, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma separated integers (train,val,test)")
    return dict(zip(SPLITS, parts))


def _spec_from_args(args) -> DatasetSpec:
    task = task_family(args.task)
    kw = {"seed": args.seed, "style": args.style}
    if args.arenas:
        kw["arenas"] = args.arenas
    if args.episodes:
        kw["episodes_per_bin"] = args.episodes
    if task == "AdHoc":
        eval_n = args.eval_n if args.eval_n is not None else args.n + 1
        return DatasetSpec.adhoc(args.n, eval_n, **kw)
    return DatasetSpec.uniform(task, args.n, **kw)


def cmd_gen(args) -> int:
    spec = _spec_from_args(args)
    splits = gen_dataset(spec, args.out)
    for name, sp in splits.items():
        print(f"{name}: {len(sp.arenas)} arenas, {len(sp.episodes)} episodes, N={spec.team_sizes[name]}")
    return 0


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    with open(path) as fh:
        return TrainConfig.from_json(json.load(fh))


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    data = Path(args.data) if args.data else out / "data"
    if not (data / "dataset.json").exists():
        args.seed = cfg.seed if args.seed is None else args.seed
        spec = _spec_from_args(args)
        print(f"generating {spec.task} dataset in {data}")
        gen_dataset(spec, data)
    train = load_split(data, "train")
    val = load_split(data, "val")

    def log(row):
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), flush=True)

    spec = load_spec(data)
    if args.method == "il":
        res = bc_train(cfg, train, out, log=log)
    else:
        res = train_run(Method.parse(args.method), cfg, train, val, out, task=spec.task, log=log)
    # remember where the data lives so `eval` can find it
    with open(out / "run.json", "w") as fh:
        json.dump({"data": str(data.resolve()), "method": args.method, "checkpoint": str(res.checkpoint)},
                  fh, indent=2)
    print(f"checkpoint: {res.checkpoint}")
    return 0


def _data_for(args) -> Path:
    if args.data:
        return Path(args.data)
    if args.ckpt not in BASELINES:
        run = Path(args.ckpt).parent / "run.json"
        if run.exists():
            return Path(json.loads(run.read_text())["data"])
    raise SystemExit("eval needs --data DIR (no run.json next to the checkpoint)")


def cmd_eval(args) -> int:
    data = _data_for(args)
    split = load_split(data, args.split)
    if args.ckpt not in BASELINES:
        read_checkpoint_header(args.ckpt)  # fail early on a bad file
    res = eval_policy(args.ckpt, split, args.out, mode=args.mode, horizon=args.horizon, seed=args.seed)
    print(res.report.format_table())
    if args.out:
        print(f"reports written to {args.out}")
    return 0


def cmd_replay(args) -> int:
    logs = load_logs(args.log)
    if not 0 <= args.index < len(logs):
        raise SystemExit(f"log has {len(logs)} episodes; index {args.index} is out of range")
    log = logs[args.index]
    arena = None
    if args.data:
        from .scene import Arena
        with open(Path(args.data) / "arenas" / f"{log.episode['arena_id']}.json") as fh:
            arena = Arena.from_json(json.load(fh))
    print(write_svg(log, args.svg, arena))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="desknav", description="Multi-agent point-goal navigation with learned messaging.")
    p.add_argument("--print-config", action="store_true", help="print the default training config as JSON")
    sub = p.add_subparsers(dest="command")

    def data_opts(sp, seed_default):
        sp.add_argument("--task", default="common", help="common, specific or adhoc")
        sp.add_argument("--n", type=int, default=2, help="team size (training team size for adhoc)")
        sp.add_argument("--eval-n", type=int, default=None, help="adhoc evaluation team size (default n+1)")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--style", default="rooms", choices=("rooms", "empty"))
        sp.add_argument("--arenas", type=_triple, default=None, help="arenas per split, e.g. 25,5,5")
        sp.add_argument("--episodes", type=_triple, default=None, help="episodes per bin per split, e.g. 50,10,20")

    g = sub.add_parser("gen", help="generate a dataset")
    data_opts(g, 0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--method", required=True, choices=("ippo", "vanilla", "memory", "il"))
    data_opts(t, None)
    t.add_argument("--data", default=None, help="existing dataset directory (generated from --task if absent)")
    t.add_argument("--config", default=None, help="JSON file with TrainConfig fields")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    e.add_argument("--ckpt", required=True, help="checkpoint file, or 'oracle' / 'random'")
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--data", default=None)
    e.add_argument("--out", default=None)
    e.add_argument("--mode", default=None, choices=("none", "vanilla", "memory"))
    e.add_argument("--horizon", type=int, default=80)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="render one logged episode as SVG")
    r.add_argument("--log", required=True)
    r.add_argument("--svg", required=True)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--data", default=None, help="dataset directory, to draw walls")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        print(json.dumps(TrainConfig().to_json(), indent=2))
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
