"""Command line: mindqa [--config F] [--seed N] [--out DIR] <command> ..."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .. import eqagen, trainer
from .. import gridhouse as gh
from . import checkpoint as ckpt
from .config import ConfigError, RunConfig

ERRORS = (ConfigError, ckpt.CheckpointError, trainer.TrainingError, eqagen.DatasetError, gh.HouseError,
          ValueError, OSError, KeyError)


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _globals(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="run configuration JSON")
    p.add_argument("--seed", type=_u64, default=d, help="overrides the config seed")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else ".", help="output directory")


def build_parser():
    ap = argparse.ArgumentParser(prog="mindqa", description="Desk-scale embodied QA with mental imagery.")
    _globals(ap, False)
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _globals(p, True)
        return p

    p = cmd("gen-world", "one small house with episodes (all in the train split)")
    p.add_argument("--size", type=int, default=9)
    p.add_argument("--rooms", type=int, default=2)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--spawn-ks", type=int, nargs="+", default=[10, 20, 30])

    cmd("gen-dataset", "houses, vocabulary, splits and episodes from the world config")

    p = cmd("train", "run one training stage")
    p.add_argument("stage", choices=trainer.STAGES)
    p.add_argument("--data", required=True, help="dataset directory")

    p = cmd("eval", "per-tier d_delta and QA accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--tiers", type=int, nargs="+", default=None)
    p.add_argument("--max-episodes", type=int, default=None)

    p = cmd("dump-topdown", "top-down map with trajectories (PPM)")
    p.add_argument("--data", required=True)
    p.add_argument("--house", default=None, help="house id (default: first)")
    p.add_argument("--checkpoint", default=None, help="draw greedy rollouts instead of expert demos")
    p.add_argument("--limit", type=int, default=4)
    p.add_argument("--scale", type=int, default=8)

    p = cmd("dump-imagery", "decoded imagined frames next to the observed ones (PPM)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--episode", default=None, help="episode id (default: first train episode)")
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--length", type=int, default=3)

    p = cmd("grad-check", "finite-difference checks of every loss")
    p.add_argument("--coords", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-4)
    return ap


def _resolve(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _prepare_out(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    return out


def _log(out, row):
    with open(out / "metrics.jsonl", "a") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def _load_navigation(path, cfg, ds):
    return trainer.load_trained(path, cfg, ds)[0]


def _find_episode(ds, episode_id):
    for split in ("train", "val", "test"):
        for ep in ds.episodes.get(split, []):
            if episode_id is None or ep.episode_id == episode_id:
                return ep
    raise KeyError(f"episode {episode_id!r} not found")


def run(args):
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    c = args.command
    if c == "gen-world":
        ds = eqagen.world_dataset(seed=cfg.seed, size=args.size, n_rooms=args.rooms, n_episodes=args.episodes,
                                  spawn_ks=tuple(args.spawn_ks))
        ds.save(out / "data")
        _log(out, {"stage": "gen-world", "houses": 1, "episodes": len(ds.episodes["train"])})
        print(out / "data")
    elif c == "gen-dataset":
        w = cfg.world
        ds = eqagen.generate_dataset(seed=cfg.seed, n_houses=w.n_houses, episodes_per_house=w.episodes_per_house,
                                     n_rooms=w.n_rooms, size=w.size, spawn_ks=w.spawn_ks, ratios=w.split_ratios)
        ds.save(out / "data")
        _log(out, {"stage": "gen-dataset", "houses": len(ds.houses),
                   **{f"episodes_{k}": len(v) for k, v in ds.episodes.items()}})
        print(out / "data")
    elif c == "train":
        ds = eqagen.Dataset.load(args.data)
        path = trainer.train_stage(args.stage, ds, cfg, out)
        print(path)
    elif c == "eval":
        from . import evaluate, plots
        ds = eqagen.Dataset.load(args.data)
        trained = _load_navigation(args.checkpoint, cfg, ds)
        split = args.split or cfg.eval.split
        tiers = tuple(args.tiers) if args.tiers else cfg.eval.tiers
        n = cfg.eval.max_episodes if args.max_episodes is None else args.max_episodes
        trajs = []
        report = evaluate.evaluate(trained, ds, split=split, tiers=tiers, seed=cfg.seed,
                                   fingerprint=cfg.fingerprint, workers=cfg.eval.workers, max_episodes=n,
                                   trajectories=trajs)
        (out / "report.json").write_text(evaluate.dumps_report(report))
        with open(out / "trajectories.jsonl", "w") as fh:
            for t in trajs:
                fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")
        plots.write_report_tsv(report, out / "report.tsv")
        plots.plot_report(report, out / "report.png")
        _log(out, {"stage": "eval", **{f"d_delta_T{k}": v["mean_d_delta"] for k, v in report["tiers"].items()}})
        sys.stdout.write(Path(out / "report.tsv").read_text())
    elif c == "dump-topdown":
        from . import dumps
        from .. import agent
        ds = eqagen.Dataset.load(args.data)
        hid = args.house or sorted(ds.houses)[0]
        if hid not in ds.houses:
            raise KeyError(f"house {hid!r} not found")
        house = ds.houses[hid]
        eps = [e for s in ("train", "val", "test") for e in ds.episodes.get(s, []) if e.house_id == hid]
        eps = eps[:args.limit]
        if args.checkpoint:
            t = _load_navigation(args.checkpoint, cfg, ds)
            trajs = [agent.run_episode(t.policy, t.mind_model, t.features, house, e, mode="greedy",
                                       planned_reward=False) for e in eps]
        else:
            trajs = [gh.replay(house, e.spawn, e.actions) for e in eps]
        path = dumps.dump_topdown(house, trajs, out / f"topdown_{hid}.ppm", scale=args.scale)
        print(path)
    elif c == "dump-imagery":
        from . import dumps
        from .. import agent
        ds = eqagen.Dataset.load(args.data)
        tensors, _ = ckpt.load_checkpoint(args.checkpoint)
        g = ckpt.split_groups(tensors)
        if "vae" not in g or "imagery" not in g:
            raise ckpt.CheckpointError(f"{args.checkpoint}: needs vae and imagery tensors")
        ep = _find_episode(ds, args.episode)
        mm = agent.MindModel(g["vae"], g["imagery"], cfg.mind)
        paths = dumps.dump_mental_rollout(mm, ds.house(ep), ep, args.step, args.length, out / "imagery",
                                          rng=np.random.default_rng(cfg.seed))
        for p in paths:
            print(p)
    elif c == "grad-check":
        from . import checks
        res = checks.run_all(seed=cfg.seed, max_coords=args.coords)
        ok = True
        for name, err in res.items():
            passed = err < args.tol
            ok &= passed
            print(f"{name}\t{err:.3e}\t{'pass' if passed else 'FAIL'}")
        _log(out, {"stage": "grad-check", **res})
        (out / "gradcheck.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
        if not ok:
            raise trainer.TrainingError("gradient check exceeded tolerance")
    return 0


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return run(args)
    except ERRORS as e:
        msg = str(e.args[0]) if isinstance(e, KeyError) and e.args else str(e)
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": msg}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
