"""Command line front end.

Subcommands: gen (materialize a dataset), train (one run), ablate (a config
matrix over seeds), gradcheck (randomized finite-difference sweep), eval
(score saved parameters against a config's task). Config files are JSON with
RunConfig's key names; --override patches individual keys with dotted paths
and JSON-literal values, e.g. --override thresholds.beta=0.5.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import ConfigError, config_from_dict
from .engine import TrainAbort, TrainState, init_state
from .harness import (evaluate_state, gradcheck_suite, make_task,
                      max_ablation_workers, run_ablation, run_experiment)
from .synthdata import GridTask, write_grid_jsonl, write_scene_jsonl


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings like mutual need no quoting
    return key, value


def _apply_override(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {dotted!r} crosses a non-object value")
    node[parts[-1]] = value


def load_config(path=None, seed=None, out=None, overrides=()):
    data = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for text in overrides:
        key, value = _parse_override(text)
        _apply_override(data, key, value)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out_dir"] = out
    return config_from_dict(data)


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="run seed (wins over the config file)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="patch one config key; dotted paths reach nested blocks")


def cmd_gen(args) -> int:
    config = load_config(args.config, args.seed, args.out, args.override)
    if config.out_dir is None:
        raise ConfigError("gen needs --out (or out_dir in the config)")
    os.makedirs(config.out_dir, exist_ok=True)
    task = make_task(config)
    if isinstance(task, GridTask):
        path = os.path.join(config.out_dir, "grid.jsonl")
        write_grid_jsonl(task, path)
    else:
        path = os.path.join(config.out_dir, "scenes.jsonl")
        write_scene_jsonl(task, path)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args.seed, args.out, args.override)
    try:
        summary = run_experiment(config)
    except TrainAbort as abort:
        print(f"aborted: {abort}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.seed, args.out, args.override)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0, 1, 2]
    policies = args.policies.split(",") if args.policies else [config.policy.policy]
    loss_forms = args.loss_forms.split(",") if args.loss_forms else [config.loss_form]
    weight_gens = args.weight_gens.split(",") if args.weight_gens else [config.weight_gen]
    out_path = None
    if config.out_dir is not None:
        os.makedirs(config.out_dir, exist_ok=True)
        out_path = os.path.join(config.out_dir, "ablation.csv")
    text = run_ablation(config, policies, loss_forms, weight_gens, seeds,
                        out_path=out_path, max_workers=max_ablation_workers())
    if out_path is None:
        print(text, end="")
    else:
        print(f"wrote {out_path}")
    return 1 if ",every seed failed" in text else 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(cases_per_form=args.cases, seed=args.seed or 0)
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0 if report["total_failures"] == 0 else 1


def cmd_eval(args) -> int:
    config = load_config(args.config, args.seed, args.out, args.override)
    task = make_task(config)
    state = init_state(task, config)
    if args.params is not None:
        _load_params(state, args.params)
    scores = evaluate_state(state, task)
    print(json.dumps(scores, sort_keys=True))
    return 0


def _load_params(state: TrainState, path: str) -> None:
    with np.load(path) as data:
        for role, params in (("student", state.student), ("teacher", state.teacher)):
            for entry in params.layout:
                key = f"{role}.{entry.name}"
                params.flat[entry.start:entry.stop] = data[key].ravel()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vcforge",
        description="virtual-category semi-supervised training on synthetic tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="materialize a dataset to a jsonl file")
    _add_common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="run one training job")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="run a policy/loss/weight-gen matrix over seeds")
    _add_common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--policies", help="comma-separated policy names")
    p.add_argument("--loss-forms", dest="loss_forms", help="comma-separated loss forms")
    p.add_argument("--weight-gens", dest="weight_gens",
                   help="comma-separated weight generators")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference sweep over all loss forms")
    p.add_argument("--cases", type=int, default=120, help="cases per loss form")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate saved parameters on a config's task")
    _add_common(p)
    p.add_argument("--params", help="params.npz written by train")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
