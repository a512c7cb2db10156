"""Command-line entry point: ``adaptclip {train,compare,ablate,overhead,report}``.

Exit codes: 0 success, 1 configuration error, 2 a run aborted, 3 missing or
corrupt artifacts. ``ADAPTCLIP_OUT`` sets the output root (``--out`` wins).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import artifacts, harness
from .artifacts import CorruptArtifact, MissingArtifact
from .clipping import VARIANTS, ConfigError
from .config import ConfigFile, parse_value
from .envs import ENV_IDS
from .trainer import TrainingAborted, train

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_MISSING = 0, 1, 2, 3


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(item, "expected key=value")
        out[key.strip()] = parse_value(value)
    if getattr(args, "iterations", None) is not None:
        out["total_iterations"] = args.iterations
    return out


def _config(args) -> ConfigFile:
    return ConfigFile.read(args.config) if args.config else ConfigFile()


def _root(args, cfg: ConfigFile):
    if args.out:
        return Path(args.out)
    if "ADAPTCLIP_OUT" in os.environ:
        return artifacts.out_root()
    return Path(cfg.plan.get("out") or artifacts.out_root())


def _common(p, plan=True):
    p.add_argument("--config", help="INI config file (see adaptclip.config for the grammar)")
    p.add_argument("--out", help="output root (default: $ADAPTCLIP_OUT or ./out)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set lambda_1=0.7 (repeatable)")
    p.add_argument("--iterations", type=int, help="training iterations per run")
    p.add_argument("--force", action="store_true", help="re-run even if a run with the same config hash is done")
    if plan:
        p.add_argument("--seeds", help="e.g. 0-4 or 0,2,5")
        p.add_argument("--jobs", type=int, help="concurrent runs")


class _Parser(argparse.ArgumentParser):
    # Bad flags are configuration errors (exit 1), not argparse's default 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: config error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptclip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="one training run")
    _common(p, plan=False)
    p.add_argument("--env", help=f"one of {', '.join(ENV_IDS)}")
    p.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("compare", help="variants vs a baseline, summary table and Wilcoxon tests")
    _common(p)
    p.add_argument("--envs")
    p.add_argument("--variants")
    p.add_argument("--baseline", default="fixed")

    p = sub.add_parser("ablate", help="single-signal ablation with early/late phase analysis")
    _common(p)
    p.add_argument("--envs")

    p = sub.add_parser("overhead", help="time the clipping-threshold path against the update phase")
    _common(p)
    p.add_argument("--env", default=None)

    p = sub.add_parser("report", help="learning-curve and threshold CSV/SVG from run logs")
    p.add_argument("run_dir", nargs="?", help="run or output root (default: output root)")
    p.add_argument("--out", help="where to write the report (default: <run_dir>/report)")
    return parser


def cmd_train(args) -> int:
    cfg = _config(args)
    plan = cfg.plan
    env = args.env or (plan.get("envs", "cartpole").split(",")[0].strip())
    overrides = _overrides(args)
    variant = args.variant or overrides.get("variant") \
        or cfg.sections.get(("adaptclip", ""), {}).get("variant") \
        or plan.get("variants", "ppo_br").split(",")[0].strip()
    if variant not in VARIANTS:
        raise ConfigError("variant", f"unknown variant {variant!r}; valid variants: {', '.join(VARIANTS)}")
    if env not in ENV_IDS:
        raise ConfigError("env", f"unknown env {env!r}; valid ids: {', '.join(ENV_IDS)}")
    config = cfg.resolve(env, variant, args.seed, overrides)
    path = artifacts.run_dir(_root(args, cfg), env, variant, config.seed)
    if not args.force and artifacts.is_complete(path, config.config_hash()):
        print(f"up to date: {path} (config {config.config_hash()}); use --force to re-run")
        return EXIT_OK
    rec = train(config, path)
    conv = rec.convergence_step
    print(f"{path}: {rec.iterations} iterations, {rec.total_env_steps} env steps, "
          f"final return {rec.final_return}, converged at {conv if conv is not None else '-'}")
    return EXIT_OK


def _plan(args, variants=None, envs=None) -> harness.ExperimentPlan:
    cfg = _config(args)
    return harness.ExperimentPlan.build(
        cfg, envs=envs, variants=variants, seeds=args.seeds, overrides=_overrides(args),
        out_dir=_root(args, cfg), jobs=args.jobs)


def _status(outcomes) -> int:
    return EXIT_OK if all(o.ok for o in outcomes) else EXIT_ABORT


def cmd_compare(args) -> int:
    plan = _plan(args, args.variants, args.envs)
    if len(plan.variants) < 2:
        raise ConfigError("variants", "compare needs at least two variants")
    if args.baseline not in plan.variants:
        raise ConfigError("baseline", f"{args.baseline!r} is not among the planned variants")
    outcomes = harness.run_plan(plan, args.force, log=print)
    res = harness.compare(plan, outcomes, args.baseline)
    print((res["dir"] / "summary.txt").read_text(), end="")
    return _status(outcomes)


def cmd_ablate(args) -> int:
    plan = _plan(args, ",".join(harness.ABLATION_VARIANTS), args.envs)
    outcomes = harness.run_plan(plan, args.force, log=print)
    res = harness.ablate(plan, outcomes)
    print((res["dir"] / "ablation.txt").read_text(), end="")
    return _status(outcomes)


def cmd_overhead(args) -> int:
    cfg = _config(args)
    envs = args.env or cfg.plan.get("envs", "cartpole").split(",")[0]
    seeds = args.seeds or cfg.plan.get("seeds", "0-2")
    plan = harness.ExperimentPlan.build(cfg, envs=envs, variants="fixed,ppo_br", seeds=seeds,
                                        overrides=_overrides(args), out_dir=_root(args, cfg), jobs=1)
    if len({r.seed for r in plan.runs}) < 3:
        raise ConfigError("seeds", "overhead needs at least 3 seeds")
    outcomes = harness.run_plan(plan, args.force, log=print)
    print(harness.overhead(plan, outcomes)["text"])
    return _status(outcomes)


def cmd_report(args) -> int:
    root = Path(args.run_dir) if args.run_dir else artifacts.out_root()
    for f in harness.report(root, args.out):
        print(f)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "ablate": cmd_ablate,
            "overhead": cmd_overhead, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a bad flag
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (MissingArtifact, CorruptArtifact) as exc:
        print(f"missing or corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
