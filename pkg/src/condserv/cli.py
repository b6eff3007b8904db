"""Command line interface: ``condserv <command> ...``.

Commands return exit code 0 on success, 1 on any error the library reports,
and 2 on bad usage (argparse's convention).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .demomodel import DemoFormatError, load_frame, save_frame
from .flow import get_estimator
from .harness import (ExperimentConfig, MissingModel, evaluate, evaluate_recovery, generate_dataset,
                      load_demos, record_demos)
from .mlp import (EmptyDataset, ModelFormatError, TrainConfig, accuracy, load_dataset, load_model,
                  save_model, train)
from .scoring import Strategy, score_all
from .servo import ServoConfig, select_demo
from .sim.config import resolve_scenario
from .sim.dynamics import PlacementError, reset
from .sim.render import render
from .sim.scripted import ScriptedPolicyError

_ERRORS = (DemoFormatError, ModelFormatError, MissingModel, ScriptedPolicyError, EmptyDataset,
           PlacementError, ValueError, KeyError, OSError)


def _strategies(text: str) -> tuple[Strategy, ...]:
    try:
        return tuple(Strategy(s.strip()) for s in text.split(",") if s.strip())
    except ValueError:
        valid = ", ".join(s.value for s in Strategy)
        raise argparse.ArgumentTypeError(f"strategies must be among: {valid}") from None


def _cmd_record(args) -> int:
    paths = record_demos(resolve_scenario(args.scenario), args.out)
    for p in paths:
        print(p)
    return 0


def _cmd_snapshot(args) -> int:
    sim = resolve_scenario(args.scenario)
    save_frame(render(reset(sim, args.seed), sim), args.out)
    print(args.out)
    return 0


def _cmd_dataset(args) -> int:
    demos, sim = load_demos(args.demos, args.scenario)
    train_set, test_set = generate_dataset(sim, demos, args.runs, args.seed, args.out,
                                           args.estimator)
    print(f"{len(train_set)} training rows, {len(test_set)} test rows -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    train_set, test_set = load_dataset(args.data)
    model, losses = train(train_set, TrainConfig(iterations=args.iterations, seed=args.seed,
                                                 learning_rate=args.lr))
    save_model(model, args.out)
    msg = f"final batch loss {losses[-1]:.4f}, train accuracy {accuracy(model, train_set):.3f}"
    if len(test_set):
        msg += f", test accuracy {accuracy(model, test_set):.3f}"
    print(f"{msg} -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    demos, sim = load_demos(args.demos, args.scenario)
    live = load_frame(args.live)
    model = load_model(args.model) if args.model else None
    reports = score_all(live, demos, get_estimator(args.estimator, sim), model)
    for r in reports:
        print(json.dumps(r.to_json(), sort_keys=True))
    selected = {s.value: select_demo(reports, s, np.random.default_rng(args.seed))
                for s in Strategy if s != Strategy.MLP or model is not None}
    print("selected: " + json.dumps(selected, sort_keys=True), file=sys.stderr)
    return 0


def _experiment(args, **extra) -> ExperimentConfig:
    return ExperimentConfig(scenario=args.scenario or "standard3", master_seed=args.seed,
                            episodes_per_object=args.episodes_per_object, episodes=args.episodes,
                            estimator=args.estimator, out_dir=args.out,
                            servo=ServoConfig(estimator=args.estimator), **extra)


def _cmd_eval(args) -> int:
    demos, sim = load_demos(args.demos, args.scenario)
    model = load_model(args.model) if args.model else None
    table = evaluate(_experiment(args, strategies=args.strategies), demos, model, sim)
    print(table.to_text(), end="")
    return 0


def _cmd_eval_recovery(args) -> int:
    demos, sim = load_demos(args.demos, args.scenario)
    model = load_model(args.model) if args.model else None
    table = evaluate_recovery(_experiment(args, drop_p=args.drop_p), demos, model, sim,
                              args.strategy)
    print(table.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condserv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("record", help="record scripted demonstrations for a scenario")
    c.add_argument("--scenario", default="standard3", help="preset name or scenario JSON file")
    c.add_argument("--out", required=True, help="directory for the demo set")
    c.set_defaults(func=_cmd_record)

    c = sub.add_parser("snapshot", help="render the initial live frame of a seeded scene")
    c.add_argument("--scenario", default="standard3")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_snapshot)

    def demo_args(c):
        c.add_argument("--demos", required=True, help="demo set directory")
        c.add_argument("--scenario", default=None,
                       help="scenario override (default: the one saved with the demos)")
        c.add_argument("--estimator", default="oracle", choices=["oracle", "blockmatch"])

    c = sub.add_parser("dataset", help="collect distance/success rows for the learned distance")
    demo_args(c)
    c.add_argument("--runs", type=int, default=150)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_dataset)

    c = sub.add_parser("train-mlp", help="train the success classifier")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--iterations", type=int, default=TrainConfig.iterations)
    c.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_train)

    c = sub.add_parser("score", help="score every demo against one live frame")
    demo_args(c)
    c.add_argument("--live", required=True, help="frame directory (see `snapshot`)")
    c.add_argument("--model", default=None)
    c.add_argument("--seed", type=int, default=0, help="seed for the random strategy")
    c.set_defaults(func=_cmd_score)

    def eval_args(c):
        demo_args(c)
        c.add_argument("--model", default=None)
        c.add_argument("--seed", type=int, default=0, help="master seed")
        c.add_argument("--episodes-per-object", type=int, default=100)
        c.add_argument("--episodes", type=int, default=None, help="total episodes (overrides)")
        c.add_argument("--out", default=None, help="directory for traces and tables")

    c = sub.add_parser("eval", help="compare selection strategies on shared seeds")
    eval_args(c)
    c.add_argument("--strategies", type=_strategies,
                   default=tuple(s for s in Strategy if s != Strategy.MLP),
                   help="comma-separated, e.g. UniformRandom,Reprojection,Mlp")
    c.set_defaults(func=_cmd_eval)

    c = sub.add_parser("eval-recovery", help="Reselect vs Retrack under injected drops")
    eval_args(c)
    c.add_argument("--drop-p", type=float, default=0.25)
    c.add_argument("--strategy", type=Strategy, default=Strategy.REPROJECTION)
    c.set_defaults(func=_cmd_eval_recovery)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"condserv {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
