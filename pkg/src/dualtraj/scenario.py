"""Self-describing key-value scenario files.

A scenario is flat ``dotted.key = value`` lines; blank lines and ``#``
comments are ignored.  Unknown keys are rejected, parse problems carry
line/column positions, and every run echoes its resolved configuration
back out in the same format so runs can be reproduced from the echo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .replan import PlannerConfig
from .sim import GENERATORS, MapConfig, SensorModel, World
from .traj import Limits


class ScenarioError(ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints3(text: str):
    parts = text.split()
    if len(parts) != 3:
        raise ValueError("expected three integers")
    return tuple(int(p) for p in parts)


SCHEMA = {
    "world.generator": (str, "forest"),
    "world.seed": (int, 1),
    "world.side": (float, 25.0),
    "world.height": (float, 3.0),
    "world.density": (float, 0.1),
    "world.radius_min": (float, 0.25),
    "world.radius_max": (float, 0.5),
    "world.hidden_cylinder": (_bool, False),
    "world.corridor_width": (float, 4.0),
    "world.approach": (float, 11.0),
    "world.exit_leg": (float, 9.0),
    "world.opening": (float, 2.0),
    "world.room": (float, 6.0),
    "world.rooms_x": (int, 2),
    "world.rooms_y": (int, 2),
    "world.door": (float, 1.6),
    "sensor.hfov_deg": (float, 90.0),
    "sensor.vfov_deg": (float, 50.0),
    "sensor.range": (float, 10.0),
    "sensor.h_rays": (int, 37),
    "sensor.v_rays": (int, 21),
    "map.resolution": (float, 0.25),
    "map.dims": (_ints3, (56, 56, 12)),
    "map.inflation_radius": (float, 0.3),
    "limits.v_max": (float, 5.0),
    "limits.a_max": (float, 5.0),
    "limits.j_max": (float, 8.0),
    "planner.alpha": (float, 1.25),
    "planner.alpha0_deg": (float, 15.0),
    "planner.gamma": (float, 0.5),
    "planner.gamma_prime": (float, 2.5),
    "planner.r": (float, 5.0),
    "planner.l_max": (float, 2.5),
    "planner.p_max": (int, 2),
    "planner.n_whole": (int, 10),
    "planner.n_safe": (int, 7),
    "planner.local_box": (float, 2.0),
    "planner.node_budget": (int, 20000),
    "planner.line_search_steps": (int, 6),
    "planner.disable_safe": (_bool, False),
    "planner.plan_in_free_only": (_bool, False),
    "planner.use_beta_r": (_bool, False),
    "planner.beta": (float, 1.0),
    "sim.step": (float, 0.1),
    "sim.latency": (float, 0.3),
    "sim.max_time": (float, 60.0),
    "sim.goal_tolerance": (float, -1.0),  # <= 0 means the default 2 * resolution
    "out.volumes": (_bool, False),
    "out.volume_samples": (int, 100000),
}


def default_config() -> dict:
    return {key: default for key, (_, default) in SCHEMA.items()}


def parse_scenario(text: str) -> dict:
    """Parse scenario text into a fully defaulted config dict."""
    config = default_config()
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if "=" not in line:
            raise ScenarioError("expected 'key = value'", ln, 1)
        key, value = line.split("=", 1)
        col = line.index("=") + 2
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ScenarioError(f"unknown key {key!r}", ln, 1)
        caster, _ = SCHEMA[key]
        try:
            config[key] = caster(value)
        except ValueError as exc:
            raise ScenarioError(f"bad value for {key}: {exc}", ln, col) from None
    return config


def apply_overrides(config: dict, pairs) -> dict:
    """Apply ``key=value`` strings (CLI --set) on top of a config."""
    out = dict(config)
    for pair in pairs:
        if "=" not in pair:
            raise ScenarioError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ScenarioError(f"unknown key {key!r}")
        caster, _ = SCHEMA[key]
        try:
            out[key] = caster(value)
        except ValueError as exc:
            raise ScenarioError(f"bad value for {key}: {exc}") from None
    return out


def echo_config(config: dict) -> str:
    lines = ["# resolved configuration (reproduces this run exactly)"]
    for key in SCHEMA:
        value = config[key]
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = " ".join(str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


# -- object construction ---------------------------------------------------------


def build_world(config: dict, seed: int | None = None) -> World:
    gen = config["world.generator"]
    if gen not in GENERATORS:
        raise ScenarioError(f"unknown world generator {gen!r}")
    seed = config["world.seed"] if seed is None else seed
    if gen == "forest":
        return GENERATORS[gen](
            seed=seed,
            side=config["world.side"],
            height=config["world.height"],
            density=config["world.density"],
            radius_range=(config["world.radius_min"], config["world.radius_max"]),
            inflation_radius=config["map.inflation_radius"],
        )
    if gen == "corner":
        return GENERATORS[gen](
            seed=seed,
            hidden_cylinder=config["world.hidden_cylinder"],
            corridor_width=config["world.corridor_width"],
            approach=config["world.approach"],
            exit_leg=config["world.exit_leg"],
            height=config["world.height"],
        )
    if gen == "bugtrap":
        return GENERATORS[gen](seed=seed, opening=config["world.opening"], height=config["world.height"])
    return GENERATORS[gen](
        seed=seed,
        room=config["world.room"],
        rooms_x=config["world.rooms_x"],
        rooms_y=config["world.rooms_y"],
        door=config["world.door"],
        height=config["world.height"],
    )


def build_sensor(config: dict) -> SensorModel:
    return SensorModel(
        horizontal_fov=np.radians(config["sensor.hfov_deg"]),
        vertical_fov=np.radians(config["sensor.vfov_deg"]),
        range=config["sensor.range"],
        h_rays=config["sensor.h_rays"],
        v_rays=config["sensor.v_rays"],
    )


def build_map(config: dict) -> MapConfig:
    return MapConfig(
        resolution=config["map.resolution"],
        dims=config["map.dims"],
        inflation_radius=config["map.inflation_radius"],
    )


def build_planner(config: dict) -> PlannerConfig:
    limits = Limits(config["limits.v_max"], config["limits.a_max"], config["limits.j_max"])
    return PlannerConfig(
        limits=limits,
        alpha=config["planner.alpha"],
        alpha0=np.radians(config["planner.alpha0_deg"]),
        gamma=config["planner.gamma"],
        gamma_prime=config["planner.gamma_prime"],
        r=config["planner.r"],
        l_max=config["planner.l_max"],
        p_max=config["planner.p_max"],
        n_whole=config["planner.n_whole"],
        n_safe=config["planner.n_safe"],
        local_box=config["planner.local_box"],
        node_budget=config["planner.node_budget"],
        line_search_steps=config["planner.line_search_steps"],
        disable_safe=config["planner.disable_safe"],
        plan_in_free_only=config["planner.plan_in_free_only"],
        use_beta_r=config["planner.use_beta_r"],
        beta=config["planner.beta"],
    )
