"""Episode orchestration on top of the simulator: logging, sweeps, ablations.

Everything here works from a resolved scenario config dict plus a seed,
so episodes are picklable units that can fan out across worker
processes.  Outputs per run: a metrics CSV row, a per-cycle JSONL stream
(keys ``jps``, ``corridor``, ``spline`` among others), and a sampled
trajectory CSV.  In the fixed-latency mode the logs are deterministic,
so wall-clock stage timings are kept on the in-memory outcomes only; the
wall-clock latency mode writes them into the JSONL records.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mapping import UNKNOWN
from .replan import ReplanOutcome
from .scenario import build_map, build_planner, build_sensor, build_world
from .sim import EpisodeMetrics, run_episode

METRIC_FIELDS = [
    "seed",
    "reached_goal",
    "flight_time",
    "distance",
    "max_speed",
    "min_true_clearance",
    "collisions",
    "replans",
]


def _point(value):
    return None if value is None else [round(float(x), 6) for x in np.asarray(value).reshape(-1)]


def cycle_record(outcome: ReplanOutcome, include_timings: bool, volumes: dict | None) -> dict:
    rec = {
        "k": outcome.k,
        "committed": outcome.new_commit,
        "reason": outcome.reason,
        "f_whole": outcome.f_whole,
        "f_safe": outcome.f_safe,
        "jps": None if outcome.jps is None else [[round(float(x), 6) for x in v] for v in outcome.jps.vertices],
        "A": _point(outcome.points.get("A")),
        "E": _point(outcome.points.get("E")),
        "R": _point(outcome.points.get("R")),
        "H": _point(outcome.points.get("H")),
        "F": _point(outcome.points.get("F")),
        "M": _point(outcome.points.get("M")),
    }
    if outcome.corridors is not None:
        rec["corridor"] = {
            name: (corr.to_log_dict() if corr is not None else None)
            for name, corr in outcome.corridors.items()
        }
    else:
        rec["corridor"] = None
    if outcome.splines is not None:
        rec["spline"] = {
            name: (spl.to_log_dict() if spl is not None else None)
            for name, spl in outcome.splines.items()
        }
    else:
        rec["spline"] = None
    if include_timings:
        rec["timings_ms"] = {
            key: round(val, 3) for key, val in outcome.timings.items() if key.endswith("_ms")
        }
    if volumes is not None:
        rec["volumes"] = volumes
    return rec


def measure_volumes(outcome: ReplanOutcome, grid, samples: int) -> dict | None:
    """Monte-Carlo union volumes of the two corridors and their unknown parts."""
    if outcome.corridors is None:
        return None
    rng = np.random.default_rng(10_000 + outcome.k)
    out = {}
    for name, corridor in outcome.corridors.items():
        if corridor is None:
            out[name] = None
            continue
        volume, inside = corridor.mc_volume(rng, samples)
        if inside.shape[0]:
            states = _raw_states(grid, inside)
            unknown_frac = float(np.mean(states == UNKNOWN))
        else:
            unknown_frac = 0.0
        out[name] = {"volume": volume, "volume_unknown": volume * unknown_frac}
    return out


def _raw_states(grid, points):
    lo = grid.origin
    idx = np.floor((points - lo) / grid.resolution).astype(int)
    dims = np.asarray(grid.dims)
    inb = np.all((idx >= 0) & (idx < dims), axis=1)
    states = np.full(points.shape[0], UNKNOWN, dtype=np.uint8)
    if inb.any():
        sel = idx[inb]
        states[inb] = grid.cells[sel[:, 0], sel[:, 1], sel[:, 2]]
    return states


@dataclass
class EpisodeArtifacts:
    seed: int
    metrics: EpisodeMetrics
    cycle_records: list
    volume_rows: list


def run_one(config: dict, seed: int, latency_mode: str = "fixed") -> EpisodeArtifacts:
    """One fully configured episode; returns its metrics plus log records."""
    world = build_world(config, seed=seed)
    cfg = build_planner(config)
    sensor = build_sensor(config)
    map_cfg = build_map(config)
    records = []
    volume_rows = []
    want_volumes = config["out.volumes"]
    include_timings = latency_mode == "wallclock"

    def hook(outcome, grid, t):
        volumes = (
            measure_volumes(outcome, grid, config["out.volume_samples"]) if want_volumes else None
        )
        if volumes is not None:
            row = {"k": outcome.k}
            for name in ("whole", "safe"):
                v = volumes.get(name)
                if v is not None:
                    row[f"{name}_volume"] = v["volume"]
                    row[f"{name}_volume_unknown"] = v["volume_unknown"]
            volume_rows.append(row)
        records.append(cycle_record(outcome, include_timings, volumes))

    goal_tol = config["sim.goal_tolerance"]
    metrics = run_episode(
        world,
        cfg,
        sensor,
        map_cfg,
        sim_step=config["sim.step"],
        planner_latency=config["sim.latency"],
        max_time=config["sim.max_time"],
        latency_mode=latency_mode,
        goal_tolerance=goal_tol if goal_tol > 0 else None,
        cycle_hook=hook,
    )
    return EpisodeArtifacts(seed=seed, metrics=metrics, cycle_records=records, volume_rows=volume_rows)


def _run_one_star(args):
    config, seed, latency_mode = args
    return run_one(config, seed, latency_mode)


def run_batch(config: dict, seeds, latency_mode: str = "fixed", workers: int = 1):
    """Episodes for every seed, optionally fanned out across processes."""
    seeds = list(seeds)
    if workers <= 1 or len(seeds) <= 1:
        return [run_one(config, s, latency_mode) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one_star, [(config, s, latency_mode) for s in seeds]))


def write_outputs(out_dir: str, artifacts, echo_text: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_echo.cfg"), "w") as fh:
        fh.write(echo_text)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for art in artifacts:
            writer.writerow({"seed": art.seed, **art.metrics.row()})
    for art in artifacts:
        with open(os.path.join(out_dir, f"cycles_seed{art.seed}.jsonl"), "w") as fh:
            for rec in art.cycle_records:
                fh.write(json.dumps(rec) + "\n")
        with open(os.path.join(out_dir, f"trajectory_seed{art.seed}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "y", "z", "vx", "vy", "vz", "speed"])
            for row in art.metrics.trajectory:
                writer.writerow([round(v, 6) for v in row])
        if art.volume_rows:
            with open(os.path.join(out_dir, f"volumes_seed{art.seed}.csv"), "w", newline="") as fh:
                fields = sorted({key for row in art.volume_rows for key in row})
                writer = csv.DictWriter(fh, fieldnames=fields)
                writer.writeheader()
                for row in art.volume_rows:
                    writer.writerow(row)


# -- ablation drivers -------------------------------------------------------------


def ablate_safe(config: dict, seeds, v_max_values, workers: int = 1):
    """Crash counts with and without the backup trajectory per speed limit."""
    table = []
    for v_max in v_max_values:
        for variant, disable in (("with_safe", False), ("no_safe", True)):
            cfg = dict(config)
            cfg["limits.v_max"] = float(v_max)
            cfg["planner.disable_safe"] = disable
            arts = run_batch(cfg, seeds, workers=workers)
            crashes = sum(a.metrics.collisions for a in arts)
            reached = sum(a.metrics.reached_goal for a in arts)
            table.append(
                {
                    "v_max": float(v_max),
                    "variant": variant,
                    "episodes": len(arts),
                    "crashes": crashes,
                    "reached_goal": reached,
                }
            )
    return table


def ablate_planspace(config: dict, seed: int):
    """Matched-step comparison of committed-prefix speeds.

    Runs one episode with the full planner while shadow-solving, at every
    cycle, the restricted variant that plans its long trajectory inside
    free-known space only, from the identical start state and map
    snapshot.  Reports the cycle where the restricted planner is most
    limited (its lowest prefix speed among cycles where both produced a
    commitment).
    """
    from .replan import CommittedTrajectory, PlannerState, replan_once

    world = build_world(config, seed=seed)
    cfg = build_planner(config)
    free_cfg = build_planner(config)
    free_cfg.plan_in_free_only = True
    sensor = build_sensor(config)
    map_cfg = build_map(config)

    shadow = PlannerState(committed=CommittedTrajectory.hover(world.start, 0.0))
    shadow.dt_prev = free_cfg.dt0
    pairs = []

    def hook(outcome, grid, t):
        st = shadow
        # shadow plans from the same vehicle history: mirror the main commitment
        # as its own so that A matches, then solve in free-known space only
        st.committed = outcome.committed if outcome.new_commit else st.committed
        shadow_out = replan_once(
            st, grid, world.goal, t, free_cfg,
            elapsed_override=config["sim.latency"],
        )
        st.k = shadow_out.k
        st.dt_prev = shadow_out.timings.get("elapsed_s", st.dt_prev)
        if shadow_out.new_commit:
            st.prev_path = shadow_out.jps
            st.f_whole = shadow_out.f_whole
            st.f_safe = shadow_out.f_safe if shadow_out.f_safe is not None else st.f_safe
        if outcome.new_commit and shadow_out.new_commit:
            pairs.append(
                {
                    "k": outcome.k,
                    "t": t,
                    "full_prefix_speed": outcome.prefix_max_speed,
                    "free_only_prefix_speed": shadow_out.prefix_max_speed,
                }
            )

    metrics = run_episode(
        world, cfg, sensor, map_cfg,
        sim_step=config["sim.step"],
        planner_latency=config["sim.latency"],
        max_time=config["sim.max_time"],
        cycle_hook=hook,
    )
    usable = [p for p in pairs if p["free_only_prefix_speed"] is not None and p["free_only_prefix_speed"] > 0.1]
    if not usable:
        return {"metrics": metrics, "pairs": pairs, "matched": None}
    matched = min(usable, key=lambda p: (p["free_only_prefix_speed"], p["k"]))
    return {"metrics": metrics, "pairs": pairs, "matched": matched}
