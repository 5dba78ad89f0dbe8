"""Command line entry point: ``reforest {train,eval,render,matrix,flightpath}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import harness
from .nn import CheckpointError, NonFiniteGradient
from .ppo import NonFiniteLoss

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _scenario_base(config_path):
    return harness.load_config(config_path).scenario


def cmd_train(args) -> int:
    records = harness.cli_train(args.preset, args.config, args.out, resume=args.resume,
                                max_updates=args.max_updates)
    for rec in records:
        print(f"step {rec['step']:>9d}  reward {rec['cumulative_reward'] or 0.0:9.3f}  "
              f"drops {rec['tree_drop_count'] or 0.0:7.3f}  episodes {rec['episodes']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = harness.cli_eval(args.ckpt, args.seed, args.runs, args.steps, args.out, args.config)
    cols = ["distance_reward", "station_distance_bonus", "tree_drop_count", "cumulative_reward"]
    print("run  " + "  ".join(f"{c:>22s}" for c in cols))
    for row in report.runs:
        print(f"{row['run']:>3d}  " + "  ".join(f"{row[c]:22.3f}" for c in cols))
    print("mean " + "  ".join(
        f"{report.aggregate[c]['mean']:12.3f} ± {report.aggregate[c]['stderr']:7.3f}" for c in cols))
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    base = _scenario_base(args.config)
    if args.world_extent:
        base = replace(base, world_extent=args.world_extent)
    for kind, path in harness.cli_render(args.seed, args.difficulty, args.out, base).items():
        print(f"{kind}: {path}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    path = harness.cli_matrix(args.out, range(args.seeds), range(1, 6), base=_scenario_base(args.config))
    print(path)
    return EXIT_OK


def cmd_flightpath(args) -> int:
    try:
        paths = harness.cli_flightpath(args.traj, args.seed, args.out, args.difficulty,
                                       _scenario_base(args.config), args.steps)
    except harness.TrajectoryFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reforest")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a preset")
    t.add_argument("--preset", required=True, choices=sorted(harness.PRESETS))
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    t.add_argument("--max-updates", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation on the test scenario")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--seed", type=int, default=harness.TEST_SEED)
    e.add_argument("--runs", type=int, default=10)
    e.add_argument("--steps", type=int)
    e.add_argument("--config", help="reject the checkpoint unless it was trained with this config")
    e.add_argument("--out")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="height map, reforestation map and tree list")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--difficulty", type=int, default=5)
    r.add_argument("--world-extent", type=float)
    r.add_argument("--config")
    r.add_argument("--out", default=".")
    r.set_defaults(func=cmd_render)

    m = sub.add_parser("matrix", help="difficulty x seed height-map mosaic")
    m.add_argument("--seeds", type=int, default=5)
    m.add_argument("--config")
    m.add_argument("--out", default=".")
    m.set_defaults(func=cmd_matrix)

    f = sub.add_parser("flightpath", help="overlay a recorded trajectory on the height map")
    f.add_argument("--traj", required=True)
    f.add_argument("--seed", type=int, default=harness.TEST_SEED)
    f.add_argument("--difficulty", type=int, default=5)
    f.add_argument("--steps", type=int, help="only plot steps up to this one")
    f.add_argument("--config")
    f.add_argument("--out", default=".")
    f.set_defaults(func=cmd_flightpath)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NonFiniteGradient) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
