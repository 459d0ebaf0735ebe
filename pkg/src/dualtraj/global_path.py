"""Grid-optimal global paths and path/grid intersection utilities.

The global planner is a 3-D jump point search over the 26-connected
voxel graph (diagonal moves are allowed whenever the destination voxel
is traversable).  Scans stop conservatively at any cell that touches a
non-traversable cell, where the full neighbor set is expanded; this only
ever enlarges the successor set, so grid-optimal lengths are preserved
while open space is still skipped over.

Intersections between a piece-wise linear path and a voxel label set are
found by sphere marching: from the current point, advance to where the
path leaves the ball whose radius is the distance to the nearest labeled
voxel, and stop once that distance falls below a threshold.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .mapping import OCCUPIED_KNOWN, UNKNOWN, SlidingGrid
from .traj import Limits, State, dt_lower_bound

_SQRT = {1: 1.0, 2: np.sqrt(2.0), 3: np.sqrt(3.0)}
DIRS26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]
_NATURAL = {}
_COMPONENTS = {}
for _d in DIRS26:
    nz = [i for i in range(3) if _d[i] != 0]
    subs = []
    for bits in range(1, 2 ** len(nz)):
        e = [0, 0, 0]
        for k, axis in enumerate(nz):
            if bits & (1 << k):
                e[axis] = _d[axis]
        subs.append(tuple(e))
    _NATURAL[_d] = subs
    _COMPONENTS[_d] = [e for e in subs if e != _d]


@dataclass
class GridPath:
    """Ordered piece-wise linear path through voxel centers."""

    vertices: np.ndarray

    def __post_init__(self):
        verts = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        keep = [verts[0]]
        for v in verts[1:]:
            if np.linalg.norm(v - keep[-1]) > 1e-12:
                keep.append(v)
        self.vertices = np.asarray(keep)
        if self.vertices.shape[0] < 2:
            raise ValueError("a path needs at least two distinct vertices")

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)))

    @property
    def start(self) -> np.ndarray:
        return self.vertices[0]

    @property
    def end(self) -> np.ndarray:
        return self.vertices[-1]


@dataclass
class DirectionChoice:
    chosen: GridPath
    costs: tuple | None
    angle_cad: float
    evaluated: bool


def _octile3(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b))
    d.sort()
    lo, mid, hi = d  # ascending
    return (_SQRT[3] - _SQRT[2]) * lo + (_SQRT[2] - 1.0) * mid + hi


def _snap_cell(blocked, idx, dims):
    """The cell itself, or the nearest traversable one within one voxel."""
    if not blocked[idx]:
        return idx
    best = None
    for d in DIRS26:
        c = (idx[0] + d[0], idx[1] + d[1], idx[2] + d[2])
        if all(0 <= c[i] < dims[i] for i in range(3)) and not blocked[c]:
            score = (_SQRT[sum(abs(x) for x in d)], c)
            if best is None or score < best:
                best = score
    return best[1] if best else None


class _JumpTables:
    """Per-direction scan tables over a fixed traversability mask.

    For every direction d and cell c, ``target[d][c]`` is the flat index of
    the first conservative jump point strictly along d (or -1: the scan
    dies on a blocked cell or the border first), and ``run[d][c]`` counts
    consecutive traversable steps along d.  A cell is a jump point when it
    touches a non-traversable cell or, for diagonal directions, when any
    lower-order component scan from it finds one.
    """

    def __init__(self, blocked: np.ndarray):
        self.blocked = blocked
        self.stop = _stop_cells(blocked)
        self.dims = blocked.shape
        self.target = {}
        self.run = {}
        straights = [d for d in DIRS26 if sum(1 for c in d if c) == 1]
        planars = [d for d in DIRS26 if sum(1 for c in d if c) == 2]
        fulls = [d for d in DIRS26 if sum(1 for c in d if c) == 3]
        has_jump = {}
        for d in straights:
            self._build(d, self.stop)
            has_jump[d] = self.target[d] >= 0
        for d in planars:
            cond = self.stop.copy()
            for sub in _COMPONENTS[d]:
                cond |= has_jump[sub]
            self._build(d, cond)
            has_jump[d] = self.target[d] >= 0
        for d in fulls:
            cond = self.stop.copy()
            for sub in _COMPONENTS[d]:
                cond |= has_jump[sub]
            self._build(d, cond)

    def _build(self, d, stopcond):
        dims = self.dims
        target = np.full(dims, -1, dtype=np.int64)
        run = np.zeros(dims, dtype=np.int32)
        flat = np.arange(self.blocked.size, dtype=np.int64).reshape(dims)
        nz = [i for i in range(3) if d[i] != 0]
        j0 = min(nz, key=lambda i: dims[i])
        order = range(dims[j0] - 1, -1, -1) if d[j0] > 0 else range(dims[j0])
        for i in order:
            nb_i = i + d[j0]
            if nb_i < 0 or nb_i >= dims[j0]:
                continue
            dst = [slice(None)] * 3
            src = [slice(None)] * 3
            dst[j0], src[j0] = i, nb_i
            for ax in range(3):
                if ax == j0 or d[ax] == 0:
                    continue
                if d[ax] > 0:
                    dst[ax] = slice(0, dims[ax] - 1)
                    src[ax] = slice(1, dims[ax])
                else:
                    dst[ax] = slice(1, dims[ax])
                    src[ax] = slice(0, dims[ax] - 1)
            dsts, srcs = tuple(dst), tuple(src)
            nb_blocked = self.blocked[srcs]
            target[dsts] = np.where(
                nb_blocked, -1, np.where(stopcond[srcs], flat[srcs], target[srcs])
            )
            run[dsts] = np.where(nb_blocked, 0, run[srcs] + 1)
        self.target[d] = target
        self.run[d] = run


def _tables_for(grid: SlidingGrid, blocked: np.ndarray, pad_key) -> _JumpTables:
    key = ("jump_tables", pad_key)
    if key not in grid._cache:
        grid._cache[key] = _JumpTables(blocked)
    return grid._cache[key]


def jps_search(grid: SlidingGrid, start, goal, pad: float | None = None) -> GridPath | None:
    """Shortest 26-connected path between the voxels holding start and goal.

    Traversable means not occupied-known after inflation (unknown space is
    optimistically free); diagonal moves only require the destination voxel
    to be traversable.  The continuous endpoints are re-attached as the
    first and last vertices.  Returns None when the goal is unreachable.
    """
    r = grid.inflation_radius if pad is None else float(pad)
    blocked = grid.inflated_mask({OCCUPIED_KNOWN}, radius=pad)
    dims = grid.dims
    lo, hi = grid.extent
    eps = grid.resolution * 1e-6

    def clamp_inside(p):
        return np.clip(np.asarray(p, dtype=float), lo + eps, hi - eps)

    s_idx = grid.voxel_of(clamp_inside(start))
    g_idx = grid.voxel_of(clamp_inside(goal))
    s_idx = _snap_cell(blocked, s_idx, dims)
    g_idx = _snap_cell(blocked, g_idx, dims)
    if s_idx is None or g_idx is None:
        return None

    tables = _tables_for(grid, blocked, round(r, 9))
    stop = tables.stop
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    goal_arr = np.asarray(g_idx)

    def successors(cell, came):
        dirs = DIRS26 if (came is None or stop[cell]) else _NATURAL[came]
        out = []
        dx, dy, dz = goal_arr - np.asarray(cell)
        for d in dirs:
            tgt = int(tables.target[d][cell])
            nxt = None
            steps_t = None
            if tgt >= 0:
                nxt = (
                    int(tgt // (dims[1] * dims[2])),
                    int((tgt // dims[2]) % dims[1]),
                    int(tgt % dims[2]),
                )
                steps_t = max(abs(nxt[i] - cell[i]) for i in range(3))
            # goal lying on this ray at or before the jump target
            t_goal = None
            ok = True
            for ax, delta in zip(range(3), (dx, dy, dz)):
                if d[ax] == 0:
                    if delta != 0:
                        ok = False
                        break
                else:
                    q = delta * d[ax]
                    if q <= 0 or (t_goal is not None and q != t_goal):
                        ok = False
                        break
                    t_goal = q
            if ok and t_goal is not None and t_goal <= tables.run[d][cell] and (
                steps_t is None or t_goal <= steps_t
            ):
                out.append((g_idx, d, t_goal))
            elif nxt is not None:
                out.append((nxt, d, steps_t))
        return out

    g_cost = {s_idx: 0.0}
    parents = {}
    heap = [(_octile3(s_idx, g_idx), 0, 0.0, s_idx, None)]
    counter = 0
    found = False
    while heap:
        _, _, gc, cell, came = heapq.heappop(heap)
        if gc > g_cost.get(cell, np.inf) + 1e-12:
            continue
        if cell == g_idx:
            found = True
            break
        for nxt, d, span in successors(cell, came):
            axes = sum(1 for i in range(3) if d[i] != 0)
            cost = gc + _SQRT[axes] * span
            if cost < g_cost.get(nxt, np.inf) - 1e-12:
                g_cost[nxt] = cost
                parents[nxt] = cell
                counter += 1
                heapq.heappush(heap, (cost + _octile3(nxt, g_idx), counter, cost, nxt, d))
    if not found:
        return None

    cells = []
    key = g_idx
    while key is not None:
        cells.append(key)
        key = parents.get(key)
    cells.reverse()
    pts = [grid.voxel_center(c) for c in cells]
    pts = _collapse_collinear(pts)
    # snap artifacts: a center within a voxel diagonal of the continuous
    # endpoint adds a stub segment that wastes a corridor polyhedron
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if len(pts) > 1 and np.linalg.norm(pts[0] - start) <= 2.0 * grid.half_diagonal:
        pts = pts[1:]
    if len(pts) > 1 and np.linalg.norm(pts[-1] - goal) <= 2.0 * grid.half_diagonal:
        pts = pts[:-1]
    verts = [start] + pts + [goal]
    try:
        return GridPath(np.asarray(verts))
    except ValueError:
        return None


def _stop_cells(blocked: np.ndarray) -> np.ndarray:
    """Cells with any non-traversable 26-neighbor (grid border included)."""
    from scipy import ndimage

    return ndimage.maximum_filter(blocked, size=3, mode="constant", cval=True)


def _collapse_collinear(points):
    if len(points) <= 2:
        return points
    out = [points[0]]
    for i in range(1, len(points) - 1):
        u = points[i] - out[-1]
        v = points[i + 1] - points[i]
        if np.linalg.norm(np.cross(u, v)) > 1e-9 * max(np.linalg.norm(u) * np.linalg.norm(v), 1e-12):
            out.append(points[i])
    out.append(points[-1])
    return out


# -- sphere marching -----------------------------------------------------------


class _NearestField:
    """Reusable nearest-distance queries against a labeled voxel set."""

    def __init__(self, grid: SlidingGrid, states, inflate: bool = False, pad: float | None = None):
        states = set(states)
        if inflate:
            self.coords = grid.mask_coords(grid.inflated_mask(states, radius=pad))
            self.pad = grid.inflation_radius if pad is None else float(pad)
        else:
            self.coords = grid.state_coords(states)
            self.pad = 0.0
        self.boundary = UNKNOWN in states
        self.grid = grid

    @property
    def empty(self) -> bool:
        return self.coords.shape[0] == 0 and not self.boundary

    def query(self, p):
        p = np.asarray(p, dtype=float)
        best = None
        if self.coords.shape[0]:
            d2 = np.sum((self.coords - p) ** 2, axis=1)
            i = int(np.argmin(d2))
            best = (self.coords[i], float(np.sqrt(d2[i])))
        if self.boundary:
            pos, dist = self.grid._nearest_exterior(p)
            dist = max(dist - self.pad, 0.0)
            if best is None or dist < best[1]:
                best = (pos, dist)
        return best


def _polyline_sphere_exit(verts, seg_idx, point, center, radius):
    """First point along the remaining path at exactly ``radius`` from center.

    The remaining path starts at ``point`` on segment ``seg_idx``.  Returns
    (exit_point, seg_idx, arc_from_point) or None when the rest of the path
    stays inside the sphere.
    """
    c = np.asarray(center, dtype=float)
    cur = np.asarray(point, dtype=float)
    arc = 0.0
    tol = 1e-9 * max(radius, 1.0) ** 2
    for i in range(seg_idx, len(verts) - 1):
        seg_end = verts[i + 1]
        d = seg_end - cur
        seg_len = float(np.linalg.norm(d))
        if seg_len < 1e-12:
            cur = seg_end
            continue
        rel = cur - c
        aa = seg_len * seg_len
        bb = 2.0 * float(rel @ d)
        cc = float(rel @ rel) - radius * radius
        if cc > tol:
            # already at or past the boundary (numerical drift): exit here
            return cur, i, arc
        disc = max(bb * bb - 4.0 * aa * cc, 0.0)
        t_exit = (-bb + np.sqrt(disc)) / (2.0 * aa)
        if t_exit <= 1.0 + 1e-12:
            t_exit = min(max(t_exit, 0.0), 1.0)
            return cur + t_exit * d, i, arc + t_exit * seg_len
        cur = seg_end
        arc += seg_len
    return None


def path_sphere_exit(path: GridPath, center, radius: float):
    """First point of the path at distance exactly ``radius`` from ``center``,
    or None when the whole path stays inside the sphere."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    hit = _polyline_sphere_exit(path.vertices, 0, path.vertices[0], center, radius)
    return None if hit is None else hit[0]


def find_intersection(
    path: GridPath,
    grid: SlidingGrid,
    states,
    eps: float | None = None,
    inflate: bool = False,
    pad: float | None = None,
):
    """Point (within eps) where the path first crosses into ``states``."""
    hit = find_intersection_arc(path, grid, states, eps, inflate, pad)
    return None if hit is None else hit[0]


def find_intersection_arc(path, grid, states, eps=None, inflate=False, pad=None):
    """Same as find_intersection but returns (point, arc_length) instead."""
    eps = grid.resolution / 2.0 if eps is None else float(eps)
    if eps <= 0:
        raise ValueError("eps must be positive")
    field = _NearestField(grid, states, inflate=inflate, pad=pad)
    if field.empty:
        return None
    verts = path.vertices
    total = path.length()
    point = verts[0]
    seg_idx = 0
    arc = 0.0
    max_steps = int(total / eps) + len(verts) + 8
    for _ in range(max_steps):
        near = field.query(point)
        if near is None:
            return None
        r = near[1]
        if r < eps:
            return point, arc
        hop = _polyline_sphere_exit(verts, seg_idx, point, point, r)
        if hop is None:
            return None
        point, seg_idx, gained = hop
        arc += gained
    return point, arc


# -- previous-path repair and direction choice ---------------------------------


def repair_previous(prev: GridPath, grid: SlidingGrid, a, goal, pad: float | None = None, eps=None):
    """Reroute the previous global path around newly seen obstacles.

    Finds the first and last crossings of the previous path into the
    (inflated) occupied set, bridges them with fresh searches, and returns
    the concatenation; when the previous path is collision-free it is just
    re-rooted at ``a``.  Returns None when any sub-search fails.
    """
    first = find_intersection(prev, grid, {OCCUPIED_KNOWN}, eps=eps, inflate=True, pad=pad)
    if first is None:
        verts = np.vstack([[np.asarray(a, dtype=float)], prev.vertices[1:]])
        try:
            return GridPath(verts)
        except ValueError:
            return None
    reversed_path = GridPath(prev.vertices[::-1])
    last = find_intersection(reversed_path, grid, {OCCUPIED_KNOWN}, eps=eps, inflate=True, pad=pad)
    legs = []
    for leg_start, leg_end in (((a), first), (first, last), (last, goal)):
        leg = jps_search(grid, leg_start, leg_end, pad=pad)
        if leg is None:
            return None
        legs.append(leg.vertices)
    verts = np.vstack([legs[0], legs[1][1:], legs[2][1:]])
    return GridPath(verts)


def _tail_length(path: GridPath, cut_point, cut_seg, cut_arc) -> float:
    return max(path.length() - cut_arc, 0.0)


def choose_direction(
    jps_a: GridPath,
    jps_b: GridPath,
    a,
    goal,
    r: float,
    alpha0: float,
    limits: Limits,
    n_intervals: int,
) -> DirectionChoice:
    """Pick the cheaper direction out of the fresh and the repaired path.

    The cost of a direction is the lower-bound interval time to its sphere
    exit plus the remaining path length flown at v_max.  Evaluation only
    happens when the two sphere exits subtend more than ``alpha0`` at the
    root; otherwise the fresh path wins outright, as it does on ties.
    """
    a = np.asarray(a, dtype=float)

    def exit_info(path):
        hit = _polyline_sphere_exit(path.vertices, 0, path.vertices[0], a, r)
        if hit is None:
            return path.end, path.length()
        point, _, arc = hit
        return point, arc

    c_pt, c_arc = exit_info(jps_a)
    d_pt, d_arc = exit_info(jps_b)
    u = c_pt - a
    v = d_pt - a
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        angle = 0.0
    else:
        angle = float(np.arccos(np.clip(u @ v / (nu * nv), -1.0, 1.0)))
    if angle <= alpha0:
        return DirectionChoice(chosen=jps_a, costs=None, angle_cad=angle, evaluated=False)

    def cost(path, exit_pt, exit_arc):
        start_state = State.at_rest(a)
        dt = dt_lower_bound(start_state, exit_pt, limits, n_intervals, 1.0)
        tail = max(path.length() - exit_arc, 0.0)
        return n_intervals * dt + tail / limits.v_max

    j_a = cost(jps_a, c_pt, c_arc)
    j_b = cost(jps_b, d_pt, d_arc)
    chosen = jps_a if j_a <= j_b else jps_b
    return DirectionChoice(chosen=chosen, costs=(j_a, j_b), angle_cad=angle, evaluated=True)


def clip_to_sphere(path: GridPath, center, radius: float) -> np.ndarray:
    """Vertices of the path truncated at its first sphere exit (the exit
    point becomes the final vertex); the full path when it never exits."""
    hit = _polyline_sphere_exit(path.vertices, 0, path.vertices[0], center, radius)
    if hit is None:
        return path.vertices.copy()
    point, seg_idx, _ = hit
    verts = [v for v in path.vertices[: seg_idx + 1]]
    if np.linalg.norm(point - verts[-1]) > 1e-12:
        verts.append(point)
    return np.asarray(verts)
