"""tokengate command line: train, eval, check, sweep, plot."""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

from .env import Catalog, Environment, default_catalog
from .numkit import derive_id
from .plotting import KINDS, MissingColumn, plot
from .policy import PolicyParams
from .trainer import ConfigError, NonFiniteLoss, TrainConfig, apply_overrides, evaluate, run

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE, EXIT_CHECK = 0, 1, 2, 3


def load_config(path: str, overrides=()) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return TrainConfig.from_dict(apply_overrides(doc, overrides))


def _summary_line(res) -> str:
    last = res.records[-1] if res.records else {}
    return (f"steps={len(res.records)} final_success={res.final_success} "
            f"reward_mean={last.get('reward_mean')} loss_total={last.get('loss_total')}")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    res = run(cfg, args.out)
    print(_summary_line(res))
    return EXIT_OK


def _load_tasks(path: str):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, list) and all(isinstance(x, str) for x in doc):
        catalog = default_catalog()
        return catalog, [catalog[t] for t in doc]
    catalog = Catalog.from_json(doc)
    return catalog, list(catalog)


def cmd_eval(args) -> int:
    params = PolicyParams.load(args.checkpoint)
    catalog, tasks = _load_tasks(args.tasks)
    env = Environment(catalog)
    bank = None
    if args.with_skills:
        from .skillbank import SkillBank

        bank = SkillBank.from_catalog(catalog)
    rate, outcomes = evaluate(params, tasks, args.with_skills, bank, env)
    print(json.dumps({"success_rate": rate, "outcomes": outcomes}, sort_keys=True))
    return EXIT_OK


def cmd_check(args) -> int:
    from .propcheck import format_table, run_all

    results = run_all()
    print(format_table(results))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump([r.to_json() for r in results], fh, indent=1)
            fh.write("\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def sweep_points(grid: dict) -> list[list[str]]:
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError([f"grid entry {k!r} must be a non-empty list"])
    return [[f"{k}={json.dumps(v)}" for k, v in zip(keys, combo)]
            for combo in itertools.product(*(grid[k] for k in keys))]


def cmd_sweep(args) -> int:
    try:
        with open(args.grid, encoding="utf-8") as fh:
            grid = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"{args.grid}: {exc}"]) from None
    base = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    points = sweep_points(grid)
    # validate every point before running any
    cfgs = []
    for i, ov in enumerate(points):
        if "seed" not in grid:
            ov = ov + [f"seed={derive_id(base.seed, i) & 0x7FFFFFFF}"]
        cfgs.append((ov, load_config(args.config, ov)))
    for i, (ov, cfg) in enumerate(cfgs):
        sub = out / f"run{i:03d}"
        res = run(cfg, sub)
        print(f"[{i + 1}/{len(cfgs)}] {' '.join(ov)} -> {_summary_line(res)}")
        index.append({"dir": sub.name, "overrides": ov, "final_success": res.final_success})
    with open(out / "sweep.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
        fh.write("\n")
    return EXIT_OK


def cmd_plot(args) -> int:
    path = plot(args.metrics, args.kind, args.out)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tokengate", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="K=V", help="dotted override, repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="greedy success rate of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True, help="catalog JSON or JSON list of task ids")
    p.add_argument("--with-skills", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check", help="proposition and gradient checks")
    p.add_argument("--json", default=None)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("sweep", help="cross-product of overrides, run sequentially")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("plot", help="SVG line chart from metrics.jsonl")
    p.add_argument("--metrics", required=True)
    p.add_argument("--kind", required=True, choices=sorted(KINDS))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except MissingColumn as exc:
        print(f"missing column: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
