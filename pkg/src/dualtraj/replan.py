"""Per-cycle replanning: two corridors, two local problems, one commitment.

Each cycle picks a start state A ahead of the vehicle on the previously
committed motion, plans a long trajectory through free-known and unknown
space toward the global path, then finds the last state R on it from
which stopping before unknown space is still possible and plans a backup
trajectory from R that ends at rest inside known-free space.  Only the
prefix up to R plus that backup is committed.  When either optimization
fails, the committed prefix would touch unknown space, or the cycle ran
over budget, the previous commitment stays active unchanged.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import decomp, global_path
from .decomp import Corridor, decompose, split_and_truncate
from .global_path import (
    GridPath,
    choose_direction,
    clip_to_sphere,
    find_intersection_arc,
    jps_search,
    path_sphere_exit,
    repair_previous,
)
from .mapping import FREE_KNOWN, OCCUPIED_KNOWN, UNKNOWN, SlidingGrid
from .traj import FixedStop, FreeStop, JerkSpline, Limits, LocalProblem, State, line_search_solve

REASON_OPT_INFEASIBLE = "opt_infeasible"
REASON_PREFIX_UNKNOWN = "prefix_hits_unknown"
REASON_OVERTIME = "overtime"


@dataclass
class PlannerConfig:
    limits: Limits
    alpha: float = 1.25
    alpha0: float = np.radians(15.0)
    gamma: float = 0.5
    gamma_prime: float = 2.5
    r: float = 5.0
    l_max: float = 2.5
    p_max: int = 2
    n_whole: int = 10
    n_safe: int = 7
    eps: float | None = None  # defaults to resolution / 2
    goal_margin: float | None = None  # defaults to 2 * resolution
    local_box: float = 2.0
    dt0: float = 0.1
    line_search_steps: int = 6
    node_budget: int = 20000
    use_beta_r: bool = False
    beta: float = 1.0
    pad_extra: float | None = None  # planner-side inflation margin over the map radius
    disable_safe: bool = False  # ablation: commit the whole trajectory directly
    plan_in_free_only: bool = False  # ablation: long trajectory restricted to free-known

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        if self.r <= 0 or self.p_max < 1:
            raise ValueError("need r > 0 and p_max >= 1")

    def pad(self, grid: SlidingGrid) -> float:
        extra = grid.half_diagonal if self.pad_extra is None else self.pad_extra
        return grid.inflation_radius + extra


@dataclass
class CommittedTrajectory:
    """Time-stamped pieces the vehicle will fly; ends at rest by build."""

    pieces: list  # (JerkSpline, (t_start, t_end))
    provenance: dict
    k: int

    @property
    def t_start(self) -> float:
        return self.pieces[0][1][0]

    @property
    def t_end(self) -> float:
        return self.pieces[-1][1][1]

    def sample(self, t: float) -> State:
        tt = min(max(t, self.t_start), self.t_end)
        for spline, (lo, hi) in self.pieces:
            if tt <= hi + 1e-12:
                return spline.sample(tt)
        return self.pieces[-1][0].sample(tt)

    @classmethod
    def hover(cls, position, t0: float, horizon: float = 3600.0) -> "CommittedTrajectory":
        still = JerkSpline(
            np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)), np.asarray(position, float).reshape(1, 3),
            dt=horizon, t0=t0,
        )
        return cls(pieces=[(still, (t0, t0 + horizon))], provenance={"hover": True}, k=0)


@dataclass
class ReplanOutcome:
    k: int
    committed: CommittedTrajectory | None
    reason: str | None
    f_whole: float | None
    f_safe: float | None
    jps: GridPath | None
    timings: dict
    points: dict  # A, E, R, H, F, M (arrays or None)
    corridors: dict | None
    splines: dict | None
    prefix_max_speed: float | None = None

    @property
    def new_commit(self) -> bool:
        return self.committed is not None


@dataclass
class PlannerState:
    committed: CommittedTrajectory
    k: int = 0
    f_whole: float = 1.0
    f_safe: float = 1.0
    dt_prev: float = 0.1
    prev_path: GridPath | None = None
    warm_whole: np.ndarray | None = None
    warm_safe: np.ndarray | None = None


# -- pure per-step operations ---------------------------------------------------


def select_A(prev: CommittedTrajectory, now: float, delta_t: float):
    """State at offset delta_t ahead on the previous commitment (the terminal
    stop state when that points past its end)."""
    t_a = min(max(now + delta_t, prev.t_start), prev.t_end)
    return prev.sample(t_a), t_a


def project_goal(g_term, a, grid: SlidingGrid, margin: float):
    """The terminal goal itself when inside the map, else the point where the
    ray from A toward it crosses the extent shrunk inward by ``margin``."""
    g = np.asarray(g_term, dtype=float)
    a = np.asarray(a, dtype=float)
    lo, hi = grid.extent
    if np.all(g > lo + margin) and np.all(g < hi - margin):
        return g.copy()
    d = g - a
    dist = np.linalg.norm(d)
    if dist < 1e-12:
        return a.copy()
    lo2, hi2 = lo + margin, hi - margin
    t_best = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo2 - a) / d
        t2 = (hi2 - a) / d
    t_exit = np.min(np.where(np.isfinite(np.maximum(t1, t2)), np.maximum(t1, t2), np.inf))
    t_best = min(max(t_exit, 0.0), 1.0)
    return a + t_best * d


def select_R(whole: JerkSpline, h_pos, t_h: float | None, a_max: float, sample_step: float):
    """Last sampled state from the spline start toward H that can still stop
    before H per the per-axis double-integrator stopping test (z ignored).

    With no H the trajectory end is returned; with no admissible sample the
    start is."""
    t_a = whole.t0
    if h_pos is None:
        t = whole.t_end
        return whole.sample(t), t
    h = np.asarray(h_pos, dtype=float)
    ts = np.arange(t_a, t_h + 1e-12, sample_step)
    best = None
    for t in ts:
        s = whole.sample(t)
        ok = True
        for j in (0, 1):
            delta = h[j] - s.x[j]
            lhs = np.sign(s.v[j] * delta) * s.v[j] ** 2 / (2.0 * abs(a_max))
            if not lhs < abs(delta):
                ok = False
                break
        if ok:
            best = t
    if best is None:
        return whole.sample(t_a), t_a
    return whole.sample(best), best


def _sample_times(t0: float, t1: float, v_cap: float, spacing: float):
    """Times whose consecutive positions are at most ``spacing`` apart for any
    speed up to sqrt(3) * v_cap (per-axis bound)."""
    step = spacing / (np.sqrt(3.0) * max(v_cap, 1e-9))
    n = max(int(np.ceil((t1 - t0) / step)), 1)
    return np.linspace(t0, t1, n + 1)


class Replanner:
    """Owns the cycle state: factors, previous commitment, previous path."""

    def __init__(self, cfg: PlannerConfig, start_position, t0: float = 0.0):
        self.cfg = cfg
        self.state = PlannerState(committed=CommittedTrajectory.hover(start_position, t0))
        self.state.dt_prev = cfg.dt0

    @property
    def committed(self) -> CommittedTrajectory:
        return self.state.committed

    def replan(
        self,
        grid: SlidingGrid,
        g_term,
        now: float,
        time_budget: float | None = None,
        elapsed_override: float | None = None,
    ) -> ReplanOutcome:
        outcome = replan_once(self.state, grid, g_term, now, self.cfg, time_budget, elapsed_override)
        st = self.state
        st.k = outcome.k
        st.dt_prev = outcome.timings.get("elapsed_s", st.dt_prev)
        if outcome.new_commit:
            st.committed = outcome.committed
            st.prev_path = outcome.jps
            st.f_whole = outcome.f_whole
            st.f_safe = outcome.f_safe if outcome.f_safe is not None else st.f_safe
        return outcome


def replan_once(
    state: PlannerState,
    grid: SlidingGrid,
    g_term,
    now: float,
    cfg: PlannerConfig,
    time_budget: float | None = None,
    elapsed_override: float | None = None,
) -> ReplanOutcome:
    """One full replanning cycle against an immutable grid snapshot."""
    t_wall = time.perf_counter()
    k = state.k + 1
    delta_t = cfg.alpha * state.dt_prev if time_budget is None else time_budget
    eps = grid.resolution / 2.0 if cfg.eps is None else cfg.eps
    margin = 2.0 * grid.resolution if cfg.goal_margin is None else cfg.goal_margin
    pad = cfg.pad(grid)
    timings = {}
    points = {"A": None, "E": None, "R": None, "H": None, "F": None, "M": None}

    def fail(reason, jps=None, corridors=None, splines=None):
        elapsed = time.perf_counter() - t_wall if elapsed_override is None else elapsed_override
        timings["elapsed_s"] = elapsed
        return ReplanOutcome(
            k=k, committed=None, reason=reason, f_whole=None, f_safe=None, jps=jps,
            timings=timings, points=points, corridors=corridors, splines=splines,
        )

    a_state, t_a = select_A(state.committed, now, delta_t)
    points["A"] = a_state.x.copy()
    goal = project_goal(g_term, a_state.x, grid, margin)

    t0 = time.perf_counter()
    jps_a = jps_search(grid, a_state.x, goal, pad=pad)
    if jps_a is None:
        timings["jps_ms"] = (time.perf_counter() - t0) * 1e3
        return fail(REASON_OPT_INFEASIBLE)
    jps_k = jps_a
    if state.prev_path is not None and _direction_changed(jps_a, state.prev_path, a_state.x, cfg.r, cfg.alpha0):
        jps_b = repair_previous(state.prev_path, grid, a_state.x, goal, pad=pad, eps=eps)
        if jps_b is not None:
            choice = choose_direction(
                jps_a, jps_b, a_state.x, goal, cfg.r, cfg.alpha0, cfg.limits, cfg.n_whole
            )
            jps_k = choice.chosen
    m_hit = find_intersection_arc(jps_k, grid, {UNKNOWN}, eps=eps, inflate=True, pad=pad)
    points["M"] = None if m_hit is None else m_hit[0].copy()
    timings["jps_ms"] = (time.perf_counter() - t0) * 1e3

    in_verts = clip_to_sphere(jps_k, a_state.x, cfg.r)
    in_verts = split_and_truncate(in_verts, cfg.l_max, cfg.p_max)
    e_pos = in_verts[-1]
    points["E"] = np.asarray(e_pos, dtype=float).copy()

    whole_states = {OCCUPIED_KNOWN, UNKNOWN} if cfg.plan_in_free_only else {OCCUPIED_KNOWN}
    t0 = time.perf_counter()
    try:
        poly_whole = decompose(grid, in_verts, whole_states, local_box=cfg.local_box, pad=pad, kind="whole")
    except ValueError:
        return fail(REASON_OPT_INFEASIBLE, jps=jps_k)
    timings["decomp_whole_ms"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    whole = line_search_solve(
        LocalProblem(
            x_init=a_state, final=FixedStop(e_pos), corridor=poly_whole,
            n_intervals=cfg.n_whole, limits=cfg.limits, dt_target=e_pos, t0=t_a,
        ),
        state.f_whole, cfg.gamma, cfg.gamma_prime, cfg.line_search_steps, cfg.node_budget,
        warm=state.warm_whole,
    )
    timings["miqp_whole_ms"] = (time.perf_counter() - t0) * 1e3
    corridors = {"whole": poly_whole, "safe": None}
    if whole is None:
        return fail(REASON_OPT_INFEASIBLE, jps=jps_k, corridors=corridors)
    state.warm_whole = whole.solution.assignment
    splines = {"whole": whole.spline, "safe": None}

    if cfg.disable_safe:
        return _commit_whole_only(state, cfg, k, whole, jps_k, t_a, timings, points, corridors,
                                  splines, t_wall, time_budget, elapsed_override, fail)

    # H: first crossing of the sampled long trajectory into inflated unknown
    ts = _sample_times(t_a, whole.spline.t_end, cfg.limits.v_max, grid.resolution / 2.0)
    sample_pts = whole.spline.sample_many(ts)
    h_pos, t_h = _first_unknown_crossing(sample_pts, ts, grid, eps, pad)
    points["H"] = None if h_pos is None else h_pos.copy()

    r_state, t_r = select_R(whole.spline, h_pos, t_h, cfg.limits.a_max, whole.dt / 10.0)
    if cfg.use_beta_r and h_pos is not None:
        t_r = min(t_a + cfg.beta * state.dt_prev, whole.spline.t_end if t_h is None else t_h)
        r_state = whole.spline.sample(t_r)
    points["R"] = r_state.x.copy()

    # scenario 2: the committed prefix must stay out of unknown space
    prefix_speed = 0.0
    if t_r > t_a:
        for t in _sample_times(t_a, t_r, cfg.limits.v_max, grid.resolution / 4.0):
            s = whole.spline.sample(t)
            prefix_speed = max(prefix_speed, s.speed)
            if grid.classify(s.x, inflate=True) == UNKNOWN:
                return fail(REASON_PREFIX_UNKNOWN, jps=jps_k, corridors=corridors, splines=splines)

    known_verts = _known_portion(in_verts, grid, eps, pad, a_state.x)
    t0 = time.perf_counter()
    try:
        poly_safe = decompose(
            grid, known_verts, {OCCUPIED_KNOWN, UNKNOWN}, local_box=cfg.local_box, pad=pad, kind="safe"
        )
    except ValueError:
        return fail(REASON_OPT_INFEASIBLE, jps=jps_k, corridors=corridors, splines=splines)
    corridors["safe"] = poly_safe
    timings["decomp_safe_ms"] = (time.perf_counter() - t0) * 1e3

    # the stopping heuristic may park R too close to the unknown frontier for
    # the backup problem; retreating along the already verified prefix is
    # always admissible, so retry from halfway and from A before giving up
    t0 = time.perf_counter()
    safe = None
    for t_try in (t_r, t_a + (t_r - t_a) / 2.0, t_a):
        start_state = whole.spline.sample(t_try)
        safe = line_search_solve(
            LocalProblem(
                x_init=start_state, final=FreeStop(), corridor=poly_safe,
                n_intervals=cfg.n_safe, limits=cfg.limits,
                dt_target=np.asarray(known_verts[-1], dtype=float), t0=t_try,
            ),
            state.f_safe, cfg.gamma, cfg.gamma_prime, cfg.line_search_steps, cfg.node_budget,
            warm=state.warm_safe,
        )
        if safe is not None:
            t_r = t_try
            r_state = start_state
            points["R"] = r_state.x.copy()
            break
        state.warm_safe = None
        if t_try == t_a:
            break
    timings["miqp_safe_ms"] = (time.perf_counter() - t0) * 1e3
    if safe is None:
        return fail(REASON_OPT_INFEASIBLE, jps=jps_k, corridors=corridors, splines=splines)
    state.warm_safe = safe.solution.assignment
    splines["safe"] = safe.spline
    points["F"] = safe.spline.sample(safe.spline.t_end).x.copy()

    pieces = []
    if t_r > t_a + 1e-12:
        pieces.append((whole.spline, (t_a, t_r)))
    pieces.append((safe.spline, (t_r, safe.spline.t_end)))
    committed = CommittedTrajectory(
        pieces=pieces,
        provenance={"whole_prefix": (t_a, t_r), "safe": (t_r, safe.spline.t_end)},
        k=k,
    )

    elapsed = time.perf_counter() - t_wall if elapsed_override is None else elapsed_override
    timings["elapsed_s"] = elapsed
    if time_budget is not None and elapsed > time_budget:
        return fail(REASON_OVERTIME, jps=jps_k, corridors=corridors, splines=splines)
    return ReplanOutcome(
        k=k, committed=committed, reason=None, f_whole=whole.f_worked, f_safe=safe.f_worked,
        jps=jps_k, timings=timings, points=points, corridors=corridors, splines=splines,
        prefix_max_speed=prefix_speed,
    )


def _commit_whole_only(state, cfg, k, whole, jps_k, t_a, timings, points, corridors, splines,
                       t_wall, time_budget, elapsed_override, fail):
    """Ablation: no backup trajectory, the whole trajectory is committed."""
    spline = whole.spline
    prefix_speed = 0.0
    for t in np.linspace(t_a, spline.t_end, 64):
        prefix_speed = max(prefix_speed, spline.sample(t).speed)
    committed = CommittedTrajectory(
        pieces=[(spline, (t_a, spline.t_end))],
        provenance={"whole_prefix": (t_a, spline.t_end), "safe": None},
        k=k,
    )
    elapsed = time.perf_counter() - t_wall if elapsed_override is None else elapsed_override
    timings["elapsed_s"] = elapsed
    if time_budget is not None and elapsed > time_budget:
        return fail(REASON_OVERTIME, jps=jps_k, corridors=corridors, splines=splines)
    points["R"] = spline.sample(spline.t_end).x.copy()
    return ReplanOutcome(
        k=k, committed=committed, reason=None, f_whole=whole.f_worked, f_safe=None,
        jps=jps_k, timings=timings, points=points, corridors=corridors, splines=splines,
        prefix_max_speed=prefix_speed,
    )


def _direction_changed(jps_a: GridPath, prev: GridPath, a, r: float, alpha0: float) -> bool:
    """Cheap pre-test on the raw previous path: repair and cost evaluation are
    only worth it when the two sphere exits disagree by more than alpha0."""
    a = np.asarray(a, dtype=float)
    c_pt = path_sphere_exit(jps_a, a, r)
    c_pt = jps_a.end if c_pt is None else c_pt
    d_pt = path_sphere_exit(prev, a, r)
    d_pt = prev.end if d_pt is None else d_pt
    u, v = c_pt - a, d_pt - a
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return False
    angle = float(np.arccos(np.clip(u @ v / (nu * nv), -1.0, 1.0)))
    return angle > alpha0


def _first_unknown_crossing(sample_pts, ts, grid, eps, pad):
    """H point: sphere-marching semantics applied to the sampled trajectory."""
    try:
        poly = GridPath(sample_pts)
    except ValueError:
        return None, None
    hit = find_intersection_arc(poly, grid, {UNKNOWN}, eps=eps, inflate=True, pad=pad)
    if hit is None:
        return None, None
    pos, arc = hit
    seg_len = np.linalg.norm(np.diff(poly.vertices, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    # poly vertices subsample the times (duplicates were deduped)
    keep = [0]
    for i in range(1, len(sample_pts)):
        if np.linalg.norm(sample_pts[i] - sample_pts[keep[-1]]) > 1e-12:
            keep.append(i)
    kept_ts = np.asarray([ts[i] for i in keep])
    if len(kept_ts) != len(cum):
        kept_ts = np.linspace(ts[0], ts[-1], len(cum))
    t_h = float(np.interp(arc, cum, kept_ts))
    return pos, t_h


def _known_portion(in_verts, grid, eps, pad, a_pos):
    """Prefix of the in-sphere path lying in free-known space, pulled back a
    pad from its first unknown crossing; degenerates to the single point A."""
    try:
        path = GridPath(in_verts)
    except ValueError:
        return np.atleast_2d(np.asarray(a_pos, dtype=float))
    hit = find_intersection_arc(path, grid, {UNKNOWN}, eps=eps, inflate=True, pad=pad)
    if hit is None:
        return path.vertices
    _, arc = hit
    cut = max(arc - pad, 0.0)
    if cut <= 1e-9:
        return np.atleast_2d(np.asarray(a_pos, dtype=float))
    return _truncate_at_arc(path.vertices, cut)


def _truncate_at_arc(verts, arc):
    out = [verts[0]]
    acc = 0.0
    for a, b in zip(verts[:-1], verts[1:]):
        seg = float(np.linalg.norm(b - a))
        if acc + seg >= arc - 1e-12:
            frac = (arc - acc) / seg if seg > 1e-12 else 0.0
            out.append(a + frac * (b - a))
            break
        out.append(b)
        acc += seg
    return np.asarray(out)
