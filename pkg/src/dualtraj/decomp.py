"""Ellipsoid-seeded convex decomposition around a piece-wise linear path.

For every path segment an axis-aligned local box collects nearby obstacle
voxel centers.  An ellipsoid whose major axis is the segment is scaled
until the closest obstacle (in the ellipsoid metric) sits on its
boundary; the tangent halfspace there, shifted to pass through the
obstacle point, cuts that point and everything behind it away.  Cutting
repeats on the surviving points, so each polyhedron ends up containing
its seed segment, excluding every collected obstacle center, and bounded
by the six local box faces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mapping import OCCUPIED_KNOWN, UNKNOWN, SlidingGrid

EXCLUDE_SHIFT = 1e-9


@dataclass
class Polyhedron:
    """Halfspace set {x : normals @ x <= offsets} around one path segment."""

    normals: np.ndarray
    offsets: np.ndarray
    seed: np.ndarray  # (2, 3) segment endpoints
    box: np.ndarray  # (2, 3) local box lo/hi

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1)
        self.seed = np.asarray(self.seed, dtype=float).reshape(2, 3)
        self.box = np.asarray(self.box, dtype=float).reshape(2, 3)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all(pts @ self.normals.T <= self.offsets[None, :] + tol, axis=1)

    def slack(self, point) -> float:
        """Smallest inequality slack at a point (negative when outside)."""
        p = np.asarray(point, dtype=float)
        return float(np.min(self.offsets - self.normals @ p))

    def to_log_dict(self) -> dict:
        return {"normals": self.normals.tolist(), "offsets": self.offsets.tolist()}


@dataclass
class Corridor:
    polys: list
    kind: str  # "whole" | "safe"

    def __post_init__(self):
        if self.kind not in ("whole", "safe"):
            raise ValueError("corridor kind must be 'whole' or 'safe'")
        if not self.polys:
            raise ValueError("corridor needs at least one polyhedron")

    def __len__(self) -> int:
        return len(self.polys)

    def bounding_box(self):
        lo = np.min([p.box[0] for p in self.polys], axis=0)
        hi = np.max([p.box[1] for p in self.polys], axis=0)
        return lo, hi

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.zeros(pts.shape[0], dtype=bool)
        for poly in self.polys:
            inside |= poly.contains(pts, tol)
        return inside

    def mc_volume(self, rng: np.random.Generator, samples: int = 100_000):
        """Monte-Carlo volume of the polyhedron union and the sample points
        that landed inside (for downstream overlap measurements)."""
        lo, hi = self.bounding_box()
        pts = rng.uniform(lo, hi, size=(samples, 3))
        inside = self.contains(pts)
        box_vol = float(np.prod(hi - lo))
        return box_vol * float(np.mean(inside)), pts[inside]

    def to_log_dict(self) -> dict:
        return {"kind": self.kind, "polys": [p.to_log_dict() for p in self.polys]}


def split_and_truncate(vertices, l_max: float, p_max: int) -> np.ndarray:
    """Subdivide segments longer than l_max into equal parts, then keep only
    the first p_max segments."""
    if l_max <= 0 or p_max < 1:
        raise ValueError("need l_max > 0 and p_max >= 1")
    verts = np.atleast_2d(np.asarray(vertices, dtype=float))
    if verts.shape[0] < 2:
        return verts.copy()
    out = [verts[0]]
    for a, b in zip(verts[:-1], verts[1:]):
        length = float(np.linalg.norm(b - a))
        parts = max(int(np.ceil(length / l_max - 1e-12)), 1)
        for i in range(1, parts + 1):
            out.append(a + (b - a) * (i / parts))
    out = np.asarray(out)
    return out[: p_max + 1] if out.shape[0] > p_max + 1 else out


def _frame_along(axis: np.ndarray) -> np.ndarray:
    """Orthonormal frame whose first column is the given direction."""
    u = axis / np.linalg.norm(axis)
    pick = np.argmin(np.abs(u))
    helper = np.zeros(3)
    helper[pick] = 1.0
    v = np.cross(u, helper)
    v /= np.linalg.norm(v)
    w = np.cross(u, v)
    return np.column_stack([u, v, w])


def _segment_cuts(start, end, points, resolution):
    """Tangent-plane halfspaces excluding every point while keeping the seed."""
    normals = []
    offsets = []
    seg = end - start
    half = float(np.linalg.norm(seg)) / 2.0
    center = (start + end) / 2.0
    if half < 1e-12:
        rot = np.eye(3)
        radii = np.array([resolution / 2.0] * 3)
    else:
        rot = _frame_along(seg)
        radii = np.array([half + resolution / 2.0, resolution / 2.0, resolution / 2.0])
    shape = rot @ np.diag(1.0 / radii**2) @ rot.T
    active = np.atleast_2d(np.asarray(points, dtype=float))
    while active.shape[0]:
        local = (active - center) @ rot
        rho = np.sum((local / radii[None, :]) ** 2, axis=1)
        i = int(np.argmin(rho))
        p = active[i]
        n = shape @ (p - center)
        nn = np.linalg.norm(n)
        use_fallback = nn < 1e-12
        if not use_fallback:
            n = n / nn
            c = float(n @ p) - EXCLUDE_SHIFT
            if max(float(n @ start), float(n @ end)) > c:
                use_fallback = True
        if use_fallback:
            # plane through p, perpendicular to the segment-to-p offset;
            # cannot cut the seed by the projection obtuse-angle property
            if half < 1e-12:
                q = center
            else:
                t = float(np.clip((p - start) @ seg / (seg @ seg), 0.0, 1.0))
                q = start + t * seg
            off = p - q
            dist = np.linalg.norm(off)
            if dist < 1e-12:
                raise ValueError("obstacle point lies on the seed segment")
            n = off / dist
            c = float(n @ p) - EXCLUDE_SHIFT
        normals.append(n)
        offsets.append(c)
        keep = active @ n <= c
        active = active[keep]
    return normals, offsets


def decompose(
    grid: SlidingGrid,
    vertices,
    obstacle_states,
    local_box: float = 2.0,
    pad: float | None = None,
    kind: str | None = None,
) -> Corridor:
    """Build one polyhedron per path segment.

    Obstacle voxels are the grid cells within ``pad`` (default: the grid
    inflation radius) of any cell in ``obstacle_states``.  When unknown
    space counts as an obstacle, the map boundary faces (inset by the pad)
    are appended as halfspaces, since everything beyond the map is
    unknown.
    """
    verts = np.atleast_2d(np.asarray(vertices, dtype=float))
    if verts.shape[0] == 1:
        verts = np.vstack([verts, verts])
    mask = grid.inflated_mask(obstacle_states, radius=pad)
    coords = grid.mask_coords(mask)
    safe_like = UNKNOWN in obstacle_states
    inset = grid.inflation_radius if pad is None else pad
    lo_ext, hi_ext = grid.extent

    polys = []
    for a, b in zip(verts[:-1], verts[1:]):
        lo = np.minimum(a, b) - local_box
        hi = np.maximum(a, b) + local_box
        if coords.shape[0]:
            sel = np.all((coords >= lo[None, :]) & (coords <= hi[None, :]), axis=1)
            pts = coords[sel]
        else:
            pts = np.zeros((0, 3))
        normals, offsets = _segment_cuts(a, b, pts, grid.resolution)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = 1.0
            normals += [e, -e]
            offsets += [hi[ax], -lo[ax]]
            if safe_like:
                normals += [e.copy(), -e.copy()]
                offsets += [hi_ext[ax] - inset, -(lo_ext[ax] + inset)]
        polys.append(
            Polyhedron(
                normals=np.asarray(normals),
                offsets=np.asarray(offsets),
                seed=np.vstack([a, b]),
                box=np.vstack([lo, hi]),
            )
        )
    return Corridor(polys=polys, kind=kind or ("safe" if safe_like else "whole"))
