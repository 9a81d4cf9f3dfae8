"""Command-line entry point: gen-data, train, eval, render.

Exit codes: 0 success, 2 usage error, 1 runtime error.  OG_LOG=error|info|debug sets verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import perception
from .config import ConfigError, RunConfig, resolve, with_variant
from .policy import VARIANTS

log = logging.getLogger("orientgate")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orientgate", description="Orientation-gated action chunking toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value file (geometry.*, model.*, train.*)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")

    g = sub.add_parser("gen-data", help="generate expert demonstrations")
    common(g)
    g.add_argument("--angles", type=_floats, default=[0.0, 45.0])
    g.add_argument("--per-angle", type=int, default=30)
    g.add_argument("--jitter", type=float)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--holdout", type=int, default=1, help="episodes held out per angle")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a policy on a dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--beta-kl", type=float)
    t.add_argument("--log", help="training log path (default: <out>.log)")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="closed-loop success rates")
    common(e)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--paired", nargs=2, metavar=("BASE", "OTHER"))
    e.add_argument("--angles", type=_floats, default=[0.0, 45.0, 22.5])
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--seed", type=int, default=1_000_000)
    e.add_argument("--jitter", type=float)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", help="report stem; writes <stem>.txt and <stem>.kv")

    r = sub.add_parser("render", help="dump frames of one rollout")
    common(r)
    who = r.add_mutually_exclusive_group(required=True)
    who.add_argument("--ckpt")
    who.add_argument("--expert", action="store_true")
    r.add_argument("--angle", type=float, default=0.0)
    r.add_argument("--seed", type=int, default=1_000_000)
    r.add_argument("--jitter", type=float)
    r.add_argument("--every", type=int, default=1)
    r.add_argument("--masks", action="store_true")
    r.add_argument("--out", required=True)
    return p


def _overrides(args, mapping: dict) -> dict:
    kv = {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def _resolve(args, mapping: dict) -> RunConfig:
    try:
        cfg = resolve(args.config, _overrides(args, mapping))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    print(f"# resolved config ({args.command})")
    print(cfg.dump())
    return cfg


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    from .data import choose_holdout, generate_dataset, write_dataset

    cfg = _resolve(args, {"jitter": "geometry.jitter_std"})
    print(f"angles = {','.join(f'{a:g}' for a in args.angles)}\nper_angle = {args.per_angle}\n"
          f"seed = {args.seed}\nholdout = {args.holdout}\nout = {args.out}")
    if args.per_angle < 1:
        raise UsageError("--per-angle must be >= 1")
    ds = generate_dataset(args.angles, args.per_angle, cfg.geometry.jitter_std, args.seed, cfg.geometry)
    if args.holdout > 0:
        ds.holdout = choose_holdout(ds, args.holdout, args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} episodes to {args.out} ({', '.join(f'{a}deg: {n}' for a, n in ds.counts.items())})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import read_dataset, train_holdout
    from .train import train

    cfg = _resolve(args, {"variant": "train.variant", "seed": "train.seed", "epochs": "train.epochs",
                          "max_steps": "train.max_steps", "batch": "train.batch", "lr": "train.lr",
                          "beta_kl": "train.beta_kl", "data": "train.data", "out": "train.out"})
    if args.variant:
        cfg = with_variant(cfg, args.variant)
    ds = read_dataset(cfg.train.data)
    if ds.geometry != cfg.geometry:
        log.warning("dataset geometry differs from the resolved config; using the dataset's")
    train_set, holdout = train_holdout(ds)
    print(f"train episodes = {len(train_set)}\nholdout episodes = {len(holdout)}")
    out = Path(cfg.train.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _, history = train(cfg.train, train_set, holdout, cfg.model, log_path=args.log or f"{out}.log",
                       ckpt_path=out)
    print(f"finished {len(history)} steps, final loss {history[-1][1]:.4f}; checkpoint {out}")
    return EXIT_OK


def _load(path):
    from .policy import ACTPolicy

    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return ACTPolicy.load(path)


def cmd_eval(args) -> int:
    from .evaluate import evaluate, paired_table

    cfg = _resolve(args, {"jitter": "geometry.jitter_std"})
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    print(f"angles = {','.join(f'{a:g}' for a in args.angles)}\ntrials = {args.trials}\n"
          f"seed = {args.seed}\nworkers = {args.workers}")
    paths = args.paired or [args.ckpt]
    reports = []
    for path in paths:
        model, meta = _load(path)
        train_angles = [float(a) for a in str(meta.get("train.angles", "")).split(",") if a]
        rep = evaluate(model, args.angles, args.trials, args.seed, cfg.geometry.jitter_std, train_angles,
                       cfg.geometry, args.workers, path)
        print(rep.table())
        reports.append(rep)
        if args.out:
            rep.write(f"{args.out}_{rep.variant}" if args.paired else args.out)
    if args.paired:
        table = paired_table(*reports)
        print(table)
        if args.out:
            Path(f"{args.out}_paired.txt").write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_render(args) -> int:
    from .data import run_expert_episode
    from .evaluate import rollout

    cfg = _resolve(args, {"jitter": "geometry.jitter_std"})
    if args.every < 1:
        raise UsageError("--every must be >= 1")
    print(f"angle = {args.angle:g}\nseed = {args.seed}\nevery = {args.every}\n"
          f"source = {'expert' if args.expert else args.ckpt}")
    if args.expert:
        ep = run_expert_episode(args.angle, args.seed, cfg.geometry.jitter_std, cfg.geometry)
        frames = [(perception.scene_from_bytes(ep.scene[t]), ep.object_mask[t], ep.robot_mask[t])
                  for t in range(ep.T)]
        success = ep.success
    else:
        model, _ = _load(args.ckpt)
        r = rollout(model, args.angle, args.seed, cfg.geometry.jitter_std, cfg.geometry, keep_frames=True)
        frames, success = r.frames, r.success
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for t in range(0, len(frames), args.every):
        scene, om, rm = frames[t]
        perception.write_pgm(out / f"scene_{t:03d}.pgm", scene)
        if args.masks:
            perception.write_pbm(out / f"object_{t:03d}.pbm", np.asarray(om))
            perception.write_pbm(out / f"robot_{t:03d}.pbm", np.asarray(rm))
        n += 1
    print(f"wrote {n} frames to {out} (success={success})")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "render": cmd_render}


def main(argv=None) -> int:
    level = os.environ.get("OG_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # reported, not re-raised: the exit code carries the outcome
        log.debug("traceback", exc_info=True)
        print(f"{parser.prog} {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
