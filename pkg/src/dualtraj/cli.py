"""Batch command line: scenarios, sweeps, ablations, solver regression files.

Exit codes: 0 all episodes collision-free and completed, 1 a collision
or missed goal occurred, 2 scenario parse failure (with line/column
diagnostics on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .runner import ablate_planspace, ablate_safe, run_batch, write_outputs
from .scenario import ScenarioError, apply_overrides, echo_config, parse_scenario
from .solver import load_miqp, solve_miqp


def parse_seeds(text: str):
    seeds = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if ".." in chunk:
            lo, hi = chunk.split("..", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif chunk:
            seeds.append(int(chunk))
    if not seeds:
        raise ValueError(f"no seeds in {text!r}")
    return seeds


def _load_config(args):
    try:
        with open(args.scenario) as fh:
            config = parse_scenario(fh.read())
        config = apply_overrides(config, args.set or [])
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(2)
    except OSError as exc:
        print(f"error: cannot read scenario: {exc}", file=sys.stderr)
        raise SystemExit(2)
    return config


def _common(parser):
    parser.add_argument("--scenario", required=True, help="scenario config file")
    parser.add_argument("--seeds", default="1", help="e.g. 1..10 or 3,5,9")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    parser.add_argument("--threads", type=int, default=1, help="episode worker processes")
    parser.add_argument("--latency-mode", choices=("fixed", "wallclock"), default="fixed")


def cmd_run(args) -> int:
    config = _load_config(args)
    seeds = parse_seeds(args.seeds)
    arts = run_batch(config, seeds, latency_mode=args.latency_mode, workers=args.threads)
    if args.out:
        write_outputs(args.out, arts, echo_config(config))
    ok = True
    for art in arts:
        row = art.metrics.row()
        print(
            f"seed {art.seed}: goal={bool(row['reached_goal'])} time={row['flight_time']}s "
            f"dist={row['distance']}m vmax={row['max_speed']}m/s "
            f"clearance={row['min_true_clearance']} collisions={row['collisions']}"
        )
        if art.metrics.collisions or not art.metrics.reached_goal:
            ok = False
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    # same episode fan-out as run; kept separate so scripts read naturally
    return cmd_run(args)


def cmd_ablate_safe(args) -> int:
    config = _load_config(args)
    seeds = parse_seeds(args.seeds)
    v_values = [float(v) for v in args.vmax.split(",")]
    table = ablate_safe(config, seeds, v_values, workers=args.threads)
    print(f"{'v_max':>6} {'variant':>10} {'ok/total':>9}")
    for row in table:
        ok = row["episodes"] - row["crashes"]
        print(f"{row['v_max']:>6.1f} {row['variant']:>10} {ok:>4}/{row['episodes']}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablate_safe.json"), "w") as fh:
            json.dump(table, fh, indent=2)
        with open(os.path.join(args.out, "config_echo.cfg"), "w") as fh:
            fh.write(echo_config(config))
    with_safe_crashes = sum(r["crashes"] for r in table if r["variant"] == "with_safe")
    return 0 if with_safe_crashes == 0 else 1


def cmd_ablate_planspace(args) -> int:
    config = _load_config(args)
    seeds = parse_seeds(args.seeds)
    results = []
    wins = 0
    for seed in seeds:
        res = ablate_planspace(config, seed)
        matched = res["matched"]
        if matched is None:
            print(f"seed {seed}: no comparable replanning step")
            results.append({"seed": seed, "matched": None})
            continue
        full = matched["full_prefix_speed"]
        free = matched["free_only_prefix_speed"]
        wins += full > free
        print(
            f"seed {seed}: committed-prefix speed {full:.2f} m/s planning through unknown "
            f"vs {free:.2f} m/s free-known only (step k={matched['k']})"
        )
        results.append({"seed": seed, "matched": matched})
    print(f"faster in {wins}/{len(seeds)} seeds")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablate_planspace.json"), "w") as fh:
            json.dump(results, fh, indent=2)
        with open(os.path.join(args.out, "config_echo.cfg"), "w") as fh:
            fh.write(echo_config(config))
    return 0


def cmd_volumes(args) -> int:
    config = _load_config(args)
    config = apply_overrides(config, ["out.volumes=true"])
    seeds = parse_seeds(args.seeds)
    arts = run_batch(config, seeds, latency_mode=args.latency_mode, workers=args.threads)
    whole, safe, safe_unknown = [], [], []
    for art in arts:
        for row in art.volume_rows:
            if "whole_volume" in row:
                whole.append(row["whole_volume"])
            if "safe_volume" in row:
                safe.append(row["safe_volume"])
                safe_unknown.append(row["safe_volume_unknown"])
    if whole and safe:
        print(f"mean corridor volume through unknown: {np.mean(whole):.2f} m^3")
        print(f"mean corridor volume known-free only: {np.mean(safe):.2f} m^3")
        print(f"mean known-free corridor volume inside unknown space: {np.mean(safe_unknown):.6f} m^3")
    if args.out:
        write_outputs(args.out, arts, echo_config(config))
    return 0


def cmd_solve_file(args) -> int:
    with open(args.file) as fh:
        problem = load_miqp(fh.read())
    sol = solve_miqp(problem, budget=args.budget)
    print(f"status: {sol.status}")
    if sol.x is not None:
        print(f"objective: {sol.objective:.12g}")
        print(f"assignment: {sol.assignment.tolist()}")
        print(f"nodes: {sol.nodes_explored}")
    return 0 if sol.status == "optimal" else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dualtraj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run episodes for each seed")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a seed sweep (alias of run, process fan-out)")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate-safe", help="crash table with and without the backup trajectory")
    _common(p)
    p.add_argument("--vmax", default="4,6,8", help="comma list of speed limits")
    p.set_defaults(func=cmd_ablate_safe)

    p = sub.add_parser("ablate-planspace", help="prefix speed: planning through unknown vs free-known only")
    _common(p)
    p.set_defaults(func=cmd_ablate_planspace)

    p = sub.add_parser("volumes", help="corridor volume comparison over episodes")
    _common(p)
    p.set_defaults(func=cmd_volumes)

    p = sub.add_parser("solve-file", help="solve a dumped optimization problem")
    p.add_argument("file")
    p.add_argument("--budget", type=int, default=20000)
    p.set_defaults(func=cmd_solve_file)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
