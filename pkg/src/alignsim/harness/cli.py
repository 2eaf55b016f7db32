"""Command-line entry point: ``alignsim <subcommand> --run-dir DIR``.

Precedence is packaged defaults, then ``--config``, then ``--set`` pairs,
then the dedicated flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import AlignSimError, MissingArtifactError
from . import pipeline as P
from .config import load_config

FLAG_KEYS = {
    "seed": ("seed",),
    "beta": ("mdpo", "beta"),
    "k": ("retrieval", "k"),
    "N": ("federation", "N"),
    "M": ("federation", "M"),
    "gamma": ("federation", "gamma"),
    "tau": ("routing", "tau"),
    "t_max": ("federation", "t_max"),
    "schedule": ("federation", "schedule"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", required=True, help="directory holding all artifacts of a run")
    common.add_argument("--config", help="JSON file overriding packaged defaults")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. federation.gamma=0.9)")
    common.add_argument("--seed", type=int)
    common.add_argument("--beta", type=float)
    common.add_argument("--k", type=int)
    common.add_argument("--N", type=int)
    common.add_argument("--M", type=int)
    common.add_argument("--gamma", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--t-max", dest="t_max", type=int)
    common.add_argument("--schedule", choices=["lockstep", "sequential", "reverse", "random", "threads"])
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="alignsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-world", "generate a synthetic world and preference data"),
        ("build-kb", "build per-domain knowledge bases"),
        ("calibrate", "fit routing score statistics on held-out queries"),
        ("train-mdpo", "train the toy policy with the preference loss family"),
        ("train-estimator", "train the confidence estimator and parent feature means"),
        ("build-graph", "measure influence gains and build the dependency graph"),
        ("route", "route live queries and write routing.jsonl"),
        ("simulate", "run routing, federation and aggregation on live queries"),
        ("sweep", "halting-threshold sweep against fixed depth"),
        ("report", "recount metrics from run logs and rewrite report.json"),
        ("all", "run every stage in order"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "train-mdpo":
            p.add_argument("--reward-file", help="JSON list of rewards to take the anchor from")
    return parser


def config_from_args(args):
    overrides = list(args.set)
    for flag, path in FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is None:
            continue
        nested = value
        for part in reversed(path):
            nested = {part: nested}
        overrides.append(nested)
    return load_config(args.config, overrides)


def dispatch(args, cfg):
    d = args.run_dir
    cmd = args.command
    if cmd == "gen-world":
        world = P.stage_gen_world(d, cfg)
        return {"domains": world.n_domains, "live": len(world.live), "heldout": len(world.heldout)}
    if cmd == "build-kb":
        return {"docs": [len(kb) for kb in P.stage_build_kb(d, cfg)]}
    if cmd == "calibrate":
        return {"domains": len(P.stage_calibrate(d, cfg))}
    if cmd == "train-mdpo":
        result = P.stage_train_mdpo(d, cfg, args.reward_file)
        return {"final_total": result.trace[-1]["total"], "anchor": result.anchor.delta}
    if cmd == "train-estimator":
        result = P.stage_train_estimator(d, cfg)
        return {"final_loss": result.trace[-1], "single_class": result.single_class}
    if cmd == "build-graph":
        graph = P.stage_build_graph(d, cfg)
        return {"edges": [[e.src, e.dst] for e in graph.edges]}
    if cmd == "route":
        return {"routed": len(P.stage_route(d, cfg))}
    if cmd == "simulate":
        return {k: v for k, v in P.stage_simulate(d, cfg).report.items() if k != "config"}
    if cmd == "sweep":
        return P.stage_sweep(d, cfg)
    if cmd == "report":
        report, mismatched = P.stage_report(d, cfg)
        out = {k: v for k, v in report.items() if k != "config"}
        out["recount_mismatches"] = mismatched
        return out
    if cmd == "all":
        return {k: v for k, v in P.run_all(d, cfg, with_sweep=True).report.items() if k != "config"}
    raise AssertionError(cmd)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        summary = dispatch(args, cfg)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AlignSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
