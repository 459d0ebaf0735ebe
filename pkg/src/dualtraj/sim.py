"""Deterministic ground-truth worlds, synthetic depth sensing, episode loop.

Worlds are static collections of axis-aligned boxes and vertical
cylinders.  The sensor casts an angular grid of rays inside a limited
field of view and reports exact analytic intersections.  The episode
runner moves a perfectly tracking vehicle along the currently published
commitment in lockstep, fuses a scan every step, and invokes the
replanner at a fixed cadence with a configurable modeled latency (a
wall-clock latency mode exists for timing studies; it gives up
determinism).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .mapping import DepthScan, SlidingGrid, UNKNOWN
from .replan import CommittedTrajectory, PlannerConfig, Replanner
from .traj import State


# -- primitives -----------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def distance(self, p) -> float:
        """Distance to the surface; negative inside."""
        p = np.asarray(p, dtype=float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        out = np.maximum(np.maximum(lo - p, p - hi), 0.0)
        outside = float(np.linalg.norm(out))
        if outside > 0.0:
            return outside
        return -float(np.min(np.minimum(p - lo, hi - p)))


@dataclass(frozen=True)
class Cylinder:
    center: tuple  # (x, y)
    radius: float
    z0: float
    z1: float

    def distance(self, p) -> float:
        p = np.asarray(p, dtype=float)
        radial = math.hypot(p[0] - self.center[0], p[1] - self.center[1]) - self.radius
        axial = max(self.z0 - p[2], p[2] - self.z1)
        if radial > 0.0 or axial > 0.0:
            return math.hypot(max(radial, 0.0), max(axial, 0.0))
        return max(radial, axial)


@dataclass
class World:
    obstacles: list
    extent: tuple  # (lo, hi) arrays
    start: np.ndarray
    goal: np.ndarray
    name: str = "world"

    def clearance(self, p) -> float:
        if not self.obstacles:
            return math.inf
        return min(ob.distance(p) for ob in self.obstacles)


def _ray_boxes(origin, dirs, boxes, t_best):
    for box in boxes:
        lo = np.asarray(box.lo) - origin
        hi = np.asarray(box.hi) - origin
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo[None, :] / dirs
            t2 = hi[None, :] / dirs
        near = np.where(np.isnan(np.minimum(t1, t2)), -np.inf, np.minimum(t1, t2)).max(axis=1)
        far = np.where(np.isnan(np.maximum(t1, t2)), np.inf, np.maximum(t1, t2)).min(axis=1)
        # rays parallel to a slab miss when the origin is outside it
        par = np.any((dirs == 0.0) & ((origin[None, :] < np.asarray(box.lo)) | (origin[None, :] > np.asarray(box.hi))), axis=1)
        hit = (~par) & (far >= near) & (far >= 0.0)
        t_hit = np.where(near > 0.0, near, far)
        valid = hit & (t_hit > 1e-9) & (t_hit < t_best)
        t_best = np.where(valid, t_hit, t_best)
    return t_best


def _ray_cylinders(origin, dirs, cyls, t_best):
    ox, oy, oz = origin
    for cyl in cyls:
        cx, cy = cyl.center
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        fx, fy = ox - cx, oy - cy
        a = dx * dx + dy * dy
        b = 2.0 * (fx * dx + fy * dy)
        c = fx * fx + fy * fy - cyl.radius**2
        disc = b * b - 4.0 * a * c
        ok = (disc >= 0.0) & (a > 1e-12)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            for sign in (-1.0, 1.0):
                t = np.where(ok, (-b + sign * sq) / (2.0 * a), np.inf)
                z = oz + t * dz
                valid = ok & (t > 1e-9) & (z >= cyl.z0) & (z <= cyl.z1) & (t < t_best)
                t_best = np.where(valid, t, t_best)
            # end caps
            for zc in (cyl.z0, cyl.z1):
                t = np.where(np.abs(dz) > 1e-12, (zc - oz) / dz, np.inf)
                px = ox + t * dx - cx
                py = oy + t * dy - cy
                valid = (t > 1e-9) & (px * px + py * py <= cyl.radius**2) & (t < t_best)
                t_best = np.where(valid, t, t_best)
    return t_best


@dataclass
class SensorModel:
    """Angular ray grid; spacing should stay near resolution/range so the
    swept frustum has no unknown stripes inside the sensing range."""

    horizontal_fov: float = np.radians(90.0)
    vertical_fov: float = np.radians(50.0)
    range: float = 10.0
    h_rays: int = 37
    v_rays: int = 21

    def __post_init__(self):
        if not (0.0 < self.horizontal_fov <= np.pi):
            raise ValueError("horizontal fov must be in (0, pi]")
        if self.range <= 0:
            raise ValueError("range must be positive")


def render_scan(world: World, position, yaw: float, sensor: SensorModel) -> DepthScan:
    """Exact analytic depth scan of the world from a pose."""
    az = yaw + np.linspace(-sensor.horizontal_fov / 2.0, sensor.horizontal_fov / 2.0, sensor.h_rays)
    el = np.linspace(-sensor.vertical_fov / 2.0, sensor.vertical_fov / 2.0, sensor.v_rays)
    azg, elg = np.meshgrid(az, el, indexing="ij")
    azg, elg = azg.reshape(-1), elg.reshape(-1)
    dirs = np.column_stack(
        [np.cos(elg) * np.cos(azg), np.cos(elg) * np.sin(azg), np.sin(elg)]
    )
    origin = np.asarray(position, dtype=float)
    t_best = np.full(dirs.shape[0], np.inf)
    boxes = [ob for ob in world.obstacles if isinstance(ob, Box)]
    cyls = [ob for ob in world.obstacles if isinstance(ob, Cylinder)]
    t_best = _ray_boxes(origin, dirs, boxes, t_best)
    t_best = _ray_cylinders(origin, dirs, cyls, t_best)
    hits = t_best <= sensor.range
    ranges = np.where(hits, t_best, sensor.range)
    return DepthScan(
        origin=origin,
        yaw=float(yaw),
        directions=dirs,
        ranges=ranges,
        hits=hits,
        max_range=sensor.range,
        horizontal_fov=sensor.horizontal_fov,
    )


# -- world generators -------------------------------------------------------------


def make_forest(
    seed: int,
    side: float = 25.0,
    height: float = 3.0,
    density: float = 0.1,
    radius_range=(0.25, 0.5),
    start=None,
    goal=None,
    clearance: float | None = None,
    inflation_radius: float = 0.3,
) -> World:
    """Random extruded-cylinder forest with protected start/goal discs."""
    rng = np.random.default_rng(seed)
    start = np.array([2.0, side / 2.0, height / 2.0]) if start is None else np.asarray(start, float)
    goal = np.array([side - 2.0, side / 2.0, height / 2.0]) if goal is None else np.asarray(goal, float)
    keep_out = 2.0 * inflation_radius if clearance is None else clearance
    count = int(round(density * side * side))
    obstacles = []
    placed = 0
    while placed < count:
        x, y = rng.uniform(0.0, side, size=2)
        r = rng.uniform(*radius_range)
        if math.hypot(x - start[0], y - start[1]) < r + keep_out + 0.5:
            continue
        if math.hypot(x - goal[0], y - goal[1]) < r + keep_out + 0.5:
            continue
        obstacles.append(Cylinder(center=(x, y), radius=r, z0=0.0, z1=height))
        placed += 1
    extent = (np.array([0.0, 0.0, 0.0]), np.array([side, side, height]))
    return World(obstacles=obstacles, extent=extent, start=start, goal=goal, name=f"forest-{seed}")


def make_corner(
    seed: int = 0,
    hidden_cylinder: bool = False,
    corridor_width: float = 4.0,
    approach: float = 11.0,
    exit_leg: float = 9.0,
    height: float = 3.0,
    wall_thickness: float = 0.4,
    cylinder_radius: float = 0.45,
) -> World:
    """An L-shaped corner; optionally a cylinder lurks just past the turn.

    The vehicle flies +x along a corridor, must turn into +y, and cannot
    see around the inner wall edge until close.  Seeds jitter the start
    offset and the hidden obstacle placement deterministically.
    """
    rng = np.random.default_rng(seed)
    w = corridor_width
    jitter_y = rng.uniform(-0.3, 0.3)
    # inner wall: blocks the straight-ahead continuation, forcing the turn
    far_x = approach + w
    obstacles = [
        # wall along the approach corridor's far side, with the turning gap
        Box(lo=(far_x, -wall_thickness - 6.0, 0.0), hi=(far_x + wall_thickness, w + exit_leg, height)),
        # near-side wall of the approach corridor
        Box(lo=(-1.0, -wall_thickness, 0.0), hi=(approach, 0.0 + 0.0, height)),
        # inner corner wall: hides the exit corridor until the turn
        Box(lo=(-1.0, w, 0.0), hi=(approach, w + wall_thickness, height)),
        # far wall of the exit corridor
        Box(lo=(approach - wall_thickness - 2.0, w + wall_thickness, 0.0), hi=(approach, w + exit_leg, height)),
    ]
    if hidden_cylinder:
        cx = approach + w / 2.0 + rng.uniform(-0.4, 0.4)
        cy = w + 1.6 + rng.uniform(0.0, 0.8)
        obstacles.append(Cylinder(center=(cx, cy), radius=cylinder_radius, z0=0.0, z1=height))
    start = np.array([1.0, w / 2.0 + jitter_y, height / 2.0])
    goal = np.array([approach + w / 2.0, w + exit_leg - 1.0, height / 2.0])
    extent = (np.array([-1.0, -7.0, 0.0]), np.array([far_x + 1.0, w + exit_leg + 1.0, height]))
    return World(obstacles=obstacles, extent=extent, start=start, goal=goal,
                 name=f"corner{'-hidden' if hidden_cylinder else ''}-{seed}")


def make_bugtrap(
    seed: int = 0,
    opening: float = 2.0,
    size: float = 6.0,
    height: float = 3.0,
    thickness: float = 0.3,
) -> World:
    """A three-sided box whose opening faces the start; the goal is behind it."""
    rng = np.random.default_rng(seed)
    cx = 10.0 + rng.uniform(-0.5, 0.5)
    cy = 8.0
    half = size / 2.0
    gap = opening / 2.0
    obstacles = [
        # back wall (far side, solid)
        Box(lo=(cx + half, cy - half, 0.0), hi=(cx + half + thickness, cy + half, height)),
        # top / bottom walls
        Box(lo=(cx - half, cy + half - thickness, 0.0), hi=(cx + half + thickness, cy + half, height)),
        Box(lo=(cx - half, cy - half, 0.0), hi=(cx + half + thickness, cy - half + thickness, height)),
        # front wall split by the opening
        Box(lo=(cx - half, cy - half, 0.0), hi=(cx - half + thickness, cy - gap, height)),
        Box(lo=(cx - half, cy + gap, 0.0), hi=(cx - half + thickness, cy + half, height)),
    ]
    start = np.array([2.0, cy, height / 2.0])
    goal = np.array([cx + half + 4.0, cy, height / 2.0])
    extent = (np.array([0.0, 0.0, 0.0]), np.array([cx + half + 6.0, 16.0, height]))
    return World(obstacles=obstacles, extent=extent, start=start, goal=goal, name=f"bugtrap-{seed}")


def make_rooms(
    seed: int = 0,
    room: float = 6.0,
    rooms_x: int = 2,
    rooms_y: int = 2,
    door: float = 1.6,
    height: float = 3.0,
    thickness: float = 0.3,
) -> World:
    """A small grid of rooms connected by door gaps (office-style clutter)."""
    rng = np.random.default_rng(seed)
    obstacles = []
    width = rooms_x * room
    depth = rooms_y * room
    for ix in range(1, rooms_x):
        x = ix * room
        for iy in range(rooms_y):
            y0 = iy * room
            off = rng.uniform(1.0, room - 1.0 - door)
            obstacles.append(Box(lo=(x - thickness / 2, y0, 0.0), hi=(x + thickness / 2, y0 + off, height)))
            obstacles.append(Box(lo=(x - thickness / 2, y0 + off + door, 0.0), hi=(x + thickness / 2, y0 + room, height)))
    for iy in range(1, rooms_y):
        y = iy * room
        for ix in range(rooms_x):
            x0 = ix * room
            off = rng.uniform(1.0, room - 1.0 - door)
            obstacles.append(Box(lo=(x0, y - thickness / 2, 0.0), hi=(x0 + off, y + thickness / 2, height)))
            obstacles.append(Box(lo=(x0 + off + door, y - thickness / 2, 0.0), hi=(x0 + room, y + thickness / 2, height)))
    start = np.array([1.2, 1.2, height / 2.0])
    goal = np.array([width - 1.2, depth - 1.2, height / 2.0])
    extent = (np.array([0.0, 0.0, 0.0]), np.array([width, depth, height]))
    return World(obstacles=obstacles, extent=extent, start=start, goal=goal, name=f"rooms-{seed}")


GENERATORS = {
    "forest": make_forest,
    "corner": make_corner,
    "bugtrap": make_bugtrap,
    "rooms": make_rooms,
}


# -- episode ----------------------------------------------------------------------


@dataclass
class EpisodeMetrics:
    reached_goal: bool = False
    flight_time: float = 0.0
    distance: float = 0.0
    max_speed: float = 0.0
    min_true_clearance: float = math.inf
    collisions: int = 0
    cycles: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)  # (t, x, y, z, vx, vy, vz, speed)

    def row(self) -> dict:
        return {
            "reached_goal": int(self.reached_goal),
            "flight_time": round(self.flight_time, 6),
            "distance": round(self.distance, 6),
            "max_speed": round(self.max_speed, 6),
            "min_true_clearance": round(self.min_true_clearance, 6)
            if math.isfinite(self.min_true_clearance)
            else "inf",
            "collisions": self.collisions,
            "replans": len(self.cycles),
        }


class Timeline:
    """What the vehicle actually flies: committed pieces stitched in time."""

    def __init__(self, committed: CommittedTrajectory):
        self.pieces = list(committed.pieces)

    def publish(self, committed: CommittedTrajectory):
        cut = committed.t_start
        kept = []
        for spline, (lo, hi) in self.pieces:
            if lo >= cut - 1e-12:
                break
            kept.append((spline, (lo, min(hi, cut))))
        self.pieces = kept + list(committed.pieces)

    def sample(self, t: float) -> State:
        lo0 = self.pieces[0][1][0]
        hi_last = self.pieces[-1][1][1]
        tt = min(max(t, lo0), hi_last)
        for spline, (lo, hi) in self.pieces:
            if tt <= hi + 1e-12:
                return spline.sample(tt)
        return self.pieces[-1][0].sample(tt)

    def signature(self):
        return tuple(
            (id(spline), round(lo, 12), round(hi, 12)) for spline, (lo, hi) in self.pieces
        )


@dataclass
class MapConfig:
    resolution: float = 0.25
    dims: tuple = (56, 56, 12)
    inflation_radius: float = 0.3


def _aim_yaw(m_point, state: State, yaw: float) -> float:
    if m_point is not None:
        d = np.asarray(m_point) - state.x
        if math.hypot(d[0], d[1]) > 1e-6:
            return math.atan2(d[1], d[0])
    if math.hypot(state.v[0], state.v[1]) > 0.1:
        return math.atan2(state.v[1], state.v[0])
    return yaw


def run_episode(
    world: World,
    cfg: PlannerConfig,
    sensor: SensorModel,
    map_cfg: MapConfig,
    g_term=None,
    sim_step: float = 0.1,
    planner_latency: float = 0.3,
    max_time: float = 60.0,
    latency_mode: str = "fixed",
    goal_tolerance: float | None = None,
    collision_substeps: int = 5,
    cycle_hook=None,
) -> EpisodeMetrics:
    """Lockstep simulation of one flight; see module docstring."""
    if sim_step <= 0:
        raise ValueError("sim_step must be positive")
    g_term = world.goal if g_term is None else np.asarray(g_term, dtype=float)
    goal_tol = 2.0 * map_cfg.resolution if goal_tolerance is None else goal_tolerance

    grid = SlidingGrid(map_cfg.resolution, map_cfg.dims, world.start, map_cfg.inflation_radius)
    # take-off volume: the world guarantees this clearance at the start
    grid.mark_free_ball(world.start, 2.0 * map_cfg.inflation_radius)
    planner = Replanner(cfg, world.start, t0=0.0)
    timeline = Timeline(planner.committed)
    metrics = EpisodeMetrics()
    vehicle_radius = map_cfg.inflation_radius

    yaw = math.atan2(g_term[1] - world.start[1], g_term[0] - world.start[0])
    t = 0.0
    next_replan = 0.0
    pending = None  # (publish_time, committed)
    m_point = None
    prev_state = timeline.sample(0.0)
    metrics.min_true_clearance = world.clearance(prev_state.x) - vehicle_radius

    steps = int(round(max_time / sim_step))
    for _ in range(steps + 1):
        if pending is not None and t >= pending[0] - 1e-12:
            timeline.publish(pending[1])
            pending = None
        state = timeline.sample(t)
        yaw = _aim_yaw(m_point, state, yaw)
        scan = render_scan(world, state.x, yaw, sensor)
        grid.recenter(state.x)
        grid.fuse_scan(scan)

        if t >= next_replan - 1e-12 and pending is None:
            override = planner_latency if latency_mode == "fixed" else None
            outcome = planner.replan(grid, g_term, now=t, elapsed_override=override)
            metrics.cycles.append(outcome)
            if cycle_hook is not None:
                cycle_hook(outcome, grid, t)
            if outcome.new_commit:
                pending = (t + planner_latency, outcome.committed)
                m_point = outcome.points.get("M")
            next_replan = t + planner_latency

        # advance one step, checking true-world clearance along the way
        crashed = False
        t_next = t + sim_step
        last_x = state.x
        for i in range(1, collision_substeps + 1):
            ts = t + sim_step * i / collision_substeps
            s = timeline.sample(ts)
            metrics.distance += float(np.linalg.norm(s.x - last_x))
            last_x = s.x
            metrics.max_speed = max(metrics.max_speed, s.speed)
            clear = world.clearance(s.x) - vehicle_radius
            metrics.min_true_clearance = min(metrics.min_true_clearance, clear)
            if clear < 0.0:
                metrics.collisions = 1
                metrics.flight_time = ts
                crashed = True
                break
        metrics.trajectory.append(
            (t, *state.x.tolist(), *state.v.tolist(), state.speed)
        )
        if crashed:
            break
        t = t_next
        end_state = timeline.sample(t)
        if np.linalg.norm(end_state.x - g_term) < goal_tol and end_state.speed < 0.1:
            metrics.reached_goal = True
            metrics.flight_time = t
            metrics.trajectory.append((t, *end_state.x.tolist(), *end_state.v.tolist(), end_state.speed))
            break
        metrics.flight_time = t
    return metrics
