"""Command-line entry point: ``kdt {plan,bench,genmap,export}``."""

from __future__ import annotations

import argparse
import sys
import numpy as np

from . import bench
from .deform import Mode, Variant
from .env_field import save_map
from .traj_tree import Scheme, plan

# config keys that have dedicated, shorter flags
_SPECIAL = {"seed", "time_budget", "variant", "mode", "scheme"}

DEFAULT_METHODS = "off,node-st,trunk-st,branch-st,tree-st"


def _flag(key: str) -> str:
    key = key.removeprefix("scenario.")
    return "--" + key.replace(".", "-").replace("_", "-")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="kdtcfg=1 key/value file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int, help="planner RNG seed (bench: base seed of trial 0)")
    p.add_argument("--budget-s", type=float, help="wall-clock budget per run in seconds")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--deform", choices=["off", "s", "st"], help="off disables deformation; s/st pick the mode")
    p.add_argument("--scheme", choices=[s.value for s in Scheme])
    group = p.add_argument_group("config keys")
    for key in bench.config_keys():
        if key in _SPECIAL:
            continue
        group.add_argument(_flag(key), dest="cfg:" + key, metavar="V")


def _collect(args: argparse.Namespace) -> dict[str, object]:
    values: dict[str, object] = {}
    if args.config:
        with open(args.config) as fh:
            values.update(bench.parse_config(fh.read(), args.config))
    for name, raw in vars(args).items():
        if name.startswith("cfg:") and raw is not None:
            key = name[4:]
            values[key] = bench.parse_value(key, raw, _flag(key))
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise bench.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = bench.parse_value(key.strip(), raw.strip(), "--set")
    if args.seed is not None:
        if getattr(args, "command", "") == "bench":
            values["scenario.seed_base"] = args.seed
        else:
            values["seed"] = args.seed
    if args.budget_s is not None:
        values["time_budget"] = args.budget_s
    if args.scheme is not None:
        values["scheme"] = Scheme(args.scheme)
    if args.variant is not None:
        values["variant"] = Variant(args.variant)
    if args.deform is not None:
        if args.deform == "off":
            values["variant"] = Variant.OFF
        else:
            values["mode"] = Mode(args.deform)
            if Variant(values.get("variant", Variant.OFF)) is Variant.OFF:
                values["variant"] = Variant.BRANCH
    return values


def _scenario(args) -> bench.Scenario:
    return bench.scenario_from_config(_collect(args))


def _run_plan(scenario: bench.Scenario):
    start, goal = scenario.states()
    return plan(scenario.config, scenario.environment(), start, goal, keep_tree=True)


def _summary(report) -> str:
    first = "none" if report.first_solution_time is None else f"{report.first_solution_time:.3f}s"
    cost = "inf" if report.best is None else f"{report.best.cost:.3f}"
    return (
        f"best_cost={cost} first_solution={first} nodes={report.node_count} "
        f"iterations={report.iterations} deform_accepted={report.deform_accepted}/{report.deform_tried}"
    )


def cmd_plan(args) -> int:
    scenario = _scenario(args)
    report = _run_plan(scenario)
    print(_summary(report))
    if args.log:
        bench.write_run_log(report, args.log)
    if args.traj:
        bench.write_trajectory_csv(report.best, args.traj)
    return 0 if report.best is not None else 2


def cmd_bench(args) -> int:
    scenario = _scenario(args)
    methods = [bench.parse_method(m, scenario.config.scheme) for m in args.methods.split(",") if m.strip()]
    result = bench.run_batch(scenario, methods, args.out, bin_s=args.bin_s, workers=args.workers)
    print("method,median_final_cost,n_solved,median_first_solution_s")
    for m in methods:
        costs = result.final_costs(m.name)
        first = result.table.first_solution[m.name]
        solved = int(np.isfinite(costs).sum())
        print(f"{m.name},{np.median(costs):.3f},{solved}/{len(costs)},{first['median_s']:.4f}")
    if args.out:
        print(f"wrote {args.out}/convergence.csv, trials.csv and per-trial logs")
    return 0


def cmd_genmap(args) -> int:
    scenario = _scenario(args)
    grid = scenario.grid()
    save_map(grid, args.out)
    print(f"wrote {args.out}: dims={grid.dims} occupied={grid.cells.mean():.4f}")
    return 0


def cmd_export(args) -> int:
    scenario = _scenario(args)
    report = _run_plan(scenario)
    print(_summary(report))
    if args.what == "best" and report.best is None:
        print("no solution found; nothing to export", file=sys.stderr)
        return 2
    rows = bench.export_geometry(report, args.what, args.out, args.svg, scenario.environment().raw)
    print(f"wrote {len(rows)} samples to {args.out}" + (f" and {args.svg}" if args.svg else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdt", description="Deformable trajectory tree planner and benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="run the planner once")
    _add_config_args(p)
    p.add_argument("--log", help="run report CSV (wall_time_s,best_cost,node_count)")
    p.add_argument("--traj", help="best trajectory CSV sampled at 0.01 s")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("bench", help="paired-seed batch over several methods")
    _add_config_args(p)
    p.add_argument("--methods", default=DEFAULT_METHODS, help="comma list like off,branch-st,krrt/node-s")
    p.add_argument("--out", help="output directory for tables and logs")
    p.add_argument("--bin-s", type=float, default=bench.DEFAULT_BIN_S)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("genmap", help="generate a map file from a seeded spec")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_genmap)

    p = sub.add_parser("export", help="run once and export tree or best geometry")
    _add_config_args(p)
    p.add_argument("--what", choices=["tree", "best"], default="best")
    p.add_argument("--out", required=True, help="polyline CSV")
    p.add_argument("--svg", help="optional top-down SVG")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (bench.ConfigError, ValueError) as exc:
        print(f"kdt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
