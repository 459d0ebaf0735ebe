"""Jerk splines and the local optimization problem built on them.

A trajectory is N cubic intervals of equal duration dt with constant
jerk inside each interval.  Each interval doubles as a cubic Bezier
curve whose four control points are affine in the knot state and the
interval jerk, which is what lets corridor membership be written as
linear constraints on the control points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decomp import Corridor
from .solver import MiqpProblem, MiqpSolution, QpProblem, solve_miqp


@dataclass(frozen=True)
class Limits:
    """Per-axis symmetric bounds on velocity, acceleration and jerk."""

    v_max: float
    a_max: float
    j_max: float

    def __post_init__(self):
        if min(self.v_max, self.a_max, self.j_max) <= 0:
            raise ValueError("limits must be strictly positive")


@dataclass
class State:
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.a = np.asarray(self.a, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.a))):
            raise ValueError("state components must be finite")

    @classmethod
    def at_rest(cls, position) -> "State":
        return cls(np.asarray(position, dtype=float), np.zeros(3), np.zeros(3))

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.v))


def control_points(coeff_a, coeff_b, coeff_c, coeff_d, dt: float) -> np.ndarray:
    """Four cubic-Bezier control points of x(t) = a t^3 + b t^2 + c t + d on [0, dt].

    Accepts per-axis coefficient arrays of shape (..., 3) and returns
    (..., 4, 3).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = np.asarray(coeff_a, dtype=float)
    b = np.asarray(coeff_b, dtype=float)
    c = np.asarray(coeff_c, dtype=float)
    d = np.asarray(coeff_d, dtype=float)
    r0 = d
    r1 = (c * dt + 3.0 * d) / 3.0
    r2 = (b * dt**2 + 2.0 * c * dt + 3.0 * d) / 3.0
    r3 = a * dt**3 + b * dt**2 + c * dt + d
    return np.stack([r0, r1, r2, r3], axis=-2)


class JerkSpline:
    """N equal-duration cubic intervals, C2 at the knots by construction."""

    def __init__(self, coeff_a, coeff_b, coeff_c, coeff_d, dt: float, t0: float = 0.0):
        self.a = np.asarray(coeff_a, dtype=float).reshape(-1, 3)
        self.b = np.asarray(coeff_b, dtype=float).reshape(-1, 3)
        self.c = np.asarray(coeff_c, dtype=float).reshape(-1, 3)
        self.d = np.asarray(coeff_d, dtype=float).reshape(-1, 3)
        self.dt = float(dt)
        self.t0 = float(t0)

    @classmethod
    def from_jerks(cls, start: State, jerks, dt: float, t0: float = 0.0) -> "JerkSpline":
        """Forward-integrate a triple integrator under piecewise-constant jerk."""
        jerks = np.asarray(jerks, dtype=float).reshape(-1, 3)
        n = jerks.shape[0]
        ca = np.empty((n, 3))
        cb = np.empty((n, 3))
        cc = np.empty((n, 3))
        cd = np.empty((n, 3))
        x, v, a = start.x.copy(), start.v.copy(), start.a.copy()
        for i in range(n):
            j = jerks[i]
            ca[i] = j / 6.0
            cb[i] = a / 2.0
            cc[i] = v
            cd[i] = x
            x = x + v * dt + a * dt**2 / 2.0 + j * dt**3 / 6.0
            v = v + a * dt + j * dt**2 / 2.0
            a = a + j * dt
        return cls(ca, cb, cc, cd, dt, t0)

    @property
    def n_intervals(self) -> int:
        return self.a.shape[0]

    @property
    def duration(self) -> float:
        return self.n_intervals * self.dt

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration

    @property
    def jerks(self) -> np.ndarray:
        return 6.0 * self.a

    def clamped(self, t: float) -> bool:
        return t < self.t0 - 1e-12 or t > self.t_end + 1e-12

    def sample(self, t: float) -> State:
        """State at absolute time t, clamped to the spline domain."""
        tt = min(max(t, self.t0), self.t_end)
        i = int((tt - self.t0) / self.dt)
        i = min(max(i, 0), self.n_intervals - 1)
        tau = tt - self.t0 - i * self.dt
        a, b, c, d = self.a[i], self.b[i], self.c[i], self.d[i]
        x = a * tau**3 + b * tau**2 + c * tau + d
        v = 3.0 * a * tau**2 + 2.0 * b * tau + c
        acc = 6.0 * a * tau + 2.0 * b
        return State(x, v, acc)

    def sample_many(self, ts) -> np.ndarray:
        """Positions at many absolute times, shape (len(ts), 3)."""
        ts = np.clip(np.asarray(ts, dtype=float), self.t0, self.t_end)
        idx = np.clip(((ts - self.t0) / self.dt).astype(int), 0, self.n_intervals - 1)
        tau = (ts - self.t0 - idx * self.dt)[:, None]
        return self.a[idx] * tau**3 + self.b[idx] * tau**2 + self.c[idx] * tau + self.d[idx]

    def knot_state(self, n: int) -> State:
        return self.sample(self.t0 + n * self.dt)

    def interval_control_points(self, n: int) -> np.ndarray:
        return control_points(self.a[n], self.b[n], self.c[n], self.d[n], self.dt)

    def objective(self) -> float:
        """Control effort: sum over intervals of |jerk|^2 dt."""
        return float(np.sum(self.jerks**2) * self.dt)

    def shifted(self, t0: float) -> "JerkSpline":
        return JerkSpline(self.a, self.b, self.c, self.d, self.dt, t0)

    def to_log_dict(self) -> dict:
        return {
            "t0": self.t0,
            "dt": self.dt,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
            "d": self.d.tolist(),
        }


# -- final-state modes ------------------------------------------------------


@dataclass(frozen=True)
class FixedStop:
    """Terminal constraint: stop exactly at a given position."""

    position: tuple

    def __init__(self, position):
        object.__setattr__(self, "position", tuple(float(x) for x in np.asarray(position).reshape(3)))


@dataclass(frozen=True)
class FreeStop:
    """Terminal constraint: stop wherever the optimizer likes."""


# -- time heuristic -----------------------------------------------------------

DT_FLOOR = 1e-3


def dt_lower_bound(x_init: State, x_final_pos, limits: Limits, n_intervals: int, f: float) -> float:
    """Per-interval duration from the constant-input rest-to-rest times.

    T_v = |delta| / v_max, T_a = sqrt(2 |delta| / a_max),
    T_j = (6 |delta| / j_max)^(1/3) per axis; dt = f * max(T) / N,
    floored at 1 ms.
    """
    if f < 1.0:
        raise ValueError("only factors f >= 1 are meaningful")
    delta = np.abs(np.asarray(x_final_pos, dtype=float).reshape(3) - x_init.x)
    t_v = delta / limits.v_max
    t_a = np.sqrt(2.0 * delta / limits.a_max)
    t_j = np.cbrt(6.0 * delta / limits.j_max)
    t_max = float(np.max(np.concatenate([t_v, t_a, t_j])))
    if t_max == 0.0:
        return DT_FLOOR
    return max(f * t_max / n_intervals, DT_FLOOR)


# -- MIQP assembly ------------------------------------------------------------


def _transfer(n_intervals: int, dt: float):
    """Scalar influence of each interval jerk on later knot states.

    Returns (cx, cv, ca) of shape (N+1, N): coefficient of jerk m in the
    position/velocity/acceleration at knot n, identical for every axis.
    """
    n = n_intervals
    cx = np.zeros((n + 1, n))
    cv = np.zeros((n + 1, n))
    ca = np.zeros((n + 1, n))
    for k in range(n):
        cx[k + 1] = cx[k] + dt * cv[k] + dt**2 / 2.0 * ca[k]
        cv[k + 1] = cv[k] + dt * ca[k]
        ca[k + 1] = ca[k]
        cx[k + 1, k] += dt**3 / 6.0
        cv[k + 1, k] += dt**2 / 2.0
        ca[k + 1, k] += dt
    return cx, cv, ca


def _knot_constants(x_init: State, n_intervals: int, dt: float):
    """Knot states produced by the initial condition alone, shape (N+1, 3)."""
    ts = np.arange(n_intervals + 1)[:, None] * dt
    xc = x_init.x[None, :] + x_init.v[None, :] * ts + x_init.a[None, :] * ts**2 / 2.0
    vc = x_init.v[None, :] + x_init.a[None, :] * ts
    ac = np.repeat(x_init.a[None, :], n_intervals + 1, axis=0)
    return xc, vc, ac


_CP_WEIGHTS = ((1.0, 0.0, 0.0), (1.0, 1.0 / 3.0, 0.0), (1.0, 2.0 / 3.0, 1.0 / 6.0), None)


def build_miqp(
    x_init: State,
    x_final_mode,
    corridor: Corridor,
    n_intervals: int,
    dt: float,
    limits: Limits,
) -> MiqpProblem:
    """Assemble the interval-allocation MIQP over per-interval jerks.

    Decision variables are the 3N jerk components (knot states are
    eliminated by forward integration) plus one binary per
    (interval, polyhedron) pair.  Activating a binary forces all four
    control points of that interval into that polyhedron; each interval
    must activate at least one.  Velocity and acceleration limits are
    enforced at the knots, jerk limits everywhere.
    """
    if n_intervals < 1 or dt <= 0:
        raise ValueError("need n_intervals >= 1 and dt > 0")
    n = n_intervals
    nv = 3 * n
    cx, cv, ca = _transfer(n, dt)
    xc, vc, ac = _knot_constants(x_init, n, dt)

    def expand(coeff_row):
        """Per-axis scalar row (N,) -> three rows (3, 3N) over interleaved vars."""
        rows = np.zeros((3, nv))
        for ax in range(3):
            rows[ax, ax::3] = coeff_row
        return rows

    # control point n,j as rows (3, 3N) and constants (3,)
    def cp_rows(ni: int, j: int):
        if j == 3:
            return expand(cx[ni + 1]), xc[ni + 1]
        wx, wv, wa = _CP_WEIGHTS[j]
        row = wx * cx[ni] + wv * dt * cv[ni] + wa * dt**2 * ca[ni]
        const = wx * xc[ni] + wv * dt * vc[ni] + wa * dt**2 * ac[ni]
        return expand(row), const

    # corridor bounding box corners for the big-M constants
    lo, hi = corridor.bounding_box()
    corners = np.array(
        [[xh, yh, zh] for xh in (lo[0], hi[0]) for yh in (lo[1], hi[1]) for zh in (lo[2], hi[2])]
    )

    binaries = []
    covers = []
    ind_rows = []
    ind_rhs = []
    ind_owner = []
    big_m = []
    for ni in range(n):
        cover = []
        for pi, poly in enumerate(corridor.polys):
            bid = len(binaries)
            binaries.append((ni, pi))
            cover.append(bid)
            m_face = np.max(corners @ poly.normals.T - poly.offsets[None, :], axis=0)
            m_face = np.maximum(m_face, 0.0)
            for j in range(4):
                rows, const = cp_rows(ni, j)
                block = poly.normals @ rows
                rhs = poly.offsets - poly.normals @ const
                ind_rows.append(block)
                ind_rhs.append(rhs)
                ind_owner.extend([bid] * len(poly.offsets))
                big_m.append(m_face)
        covers.append(cover)

    ind_rows = np.vstack(ind_rows) if ind_rows else np.zeros((0, nv))
    ind_rhs = np.concatenate(ind_rhs) if ind_rhs else np.zeros(0)
    big_m = np.concatenate(big_m) if big_m else np.zeros(0)
    ind_owner = np.asarray(ind_owner, dtype=int)

    # equality rows: terminal stop condition (initial state is baked in)
    eq_rows = [expand(cv[n]), expand(ca[n])]
    eq_rhs = [-vc[n], -ac[n]]
    if isinstance(x_final_mode, FixedStop):
        eq_rows.insert(0, expand(cx[n]))
        eq_rhs.insert(0, np.asarray(x_final_mode.position) - xc[n])
    elif not isinstance(x_final_mode, FreeStop):
        raise TypeError("x_final_mode must be FixedStop or FreeStop")
    aeq = np.vstack(eq_rows)
    beq = np.concatenate(eq_rhs)

    # knot limits (all knots incl. the final one) and jerk bounds
    ain_rows = []
    ain_rhs = []
    for ni in range(n + 1):
        vr = expand(cv[ni])
        ar = expand(ca[ni])
        ain_rows += [vr, -vr, ar, -ar]
        ain_rhs += [
            limits.v_max - vc[ni],
            limits.v_max + vc[ni],
            limits.a_max - ac[ni],
            limits.a_max + ac[ni],
        ]
    eye = np.eye(nv)
    ain_rows += [eye, -eye]
    ain_rhs += [np.full(nv, limits.j_max), np.full(nv, limits.j_max)]
    ain = np.vstack(ain_rows)
    bin_ = np.concatenate(ain_rhs)

    base = QpProblem(H=2.0 * dt * np.eye(nv), g=np.zeros(nv), Aeq=aeq, beq=beq, Ain=ain, bin=bin_)
    return MiqpProblem(
        base=base,
        binaries=binaries,
        ind_rows=ind_rows,
        ind_rhs=ind_rhs,
        ind_owner=ind_owner,
        covers=covers,
        big_m=big_m,
    )


# -- time-allocation line search ----------------------------------------------


@dataclass
class LocalProblem:
    """Everything the line search needs to pose one local optimization."""

    x_init: State
    final: object  # FixedStop | FreeStop
    corridor: Corridor
    n_intervals: int
    limits: Limits
    dt_target: np.ndarray  # position the dt heuristic measures displacement to
    t0: float = 0.0


@dataclass
class LocalSolution:
    spline: JerkSpline
    f_worked: float
    dt: float
    solution: MiqpSolution


def factor_lattice(f_prev: float, gamma: float, gamma_prime: float, n_steps: int = 6):
    """Increasing factors to try: an even lattice over the search interval,
    clamped so only factors >= 1 appear."""
    if gamma < 0 or gamma_prime < 0:
        raise ValueError("gamma spans must be >= 0")
    start = max(1.0, f_prev - gamma)
    end = max(start, f_prev + gamma_prime)
    step = (gamma + gamma_prime) / max(n_steps, 1)
    if step <= 0:
        return [start]
    values = [start]
    while values[-1] + step <= end + 1e-12:
        values.append(values[-1] + step)
    return values


def line_search_solve(
    prob: LocalProblem,
    f_prev: float,
    gamma: float,
    gamma_prime: float,
    n_steps: int = 6,
    node_budget: int = 20000,
    warm=None,
) -> LocalSolution | None:
    """Try increasing time factors until the MIQP is feasible.

    Returns the first feasible solution and the factor that produced it,
    or None when every lattice factor fails.  A solver timeout with a
    feasible incumbent counts as success.
    """
    if warm is not None:
        warm = np.asarray(warm, dtype=int)
        if warm.shape[0] != prob.n_intervals or warm.max(initial=0) >= len(prob.corridor.polys):
            warm = None
    for f in factor_lattice(f_prev, gamma, gamma_prime, n_steps):
        dt = dt_lower_bound(prob.x_init, prob.dt_target, prob.limits, prob.n_intervals, f)
        miqp = build_miqp(prob.x_init, prob.final, prob.corridor, prob.n_intervals, dt, prob.limits)
        sol = solve_miqp(miqp, budget=node_budget, warm=warm)
        if sol.x is not None and sol.status in ("optimal", "timeout"):
            jerks = sol.x.reshape(prob.n_intervals, 3)
            spline = JerkSpline.from_jerks(prob.x_init, jerks, dt, prob.t0)
            return LocalSolution(spline=spline, f_worked=f, dt=dt, solution=sol)
    return None
