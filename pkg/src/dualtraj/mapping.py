"""Sliding occupancy grid: depth-scan fusion, relabeling, distance queries.

The grid keeps a dense block of voxels centered on the vehicle.  Every
voxel is in exactly one of three states (free-known, occupied-known,
unknown); everything outside the stored extent counts as unknown.  Scans
are fused with an exact voxel walk along each ray: a voxel is freed when
the segment from the sensor to the measured range passes through it, and
the voxel containing the range endpoint of a hitting ray becomes
occupied.  Within one fusion all occupied writes are applied after all
free writes, and occupied voxels are never downgraded by later scans.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class VoxelState:
    """Voxel labels. Kept as plain ints for cheap dense-array storage."""

    UNKNOWN = 0
    FREE_KNOWN = 1
    OCCUPIED_KNOWN = 2

    ALL = (UNKNOWN, FREE_KNOWN, OCCUPIED_KNOWN)


UNKNOWN = VoxelState.UNKNOWN
FREE_KNOWN = VoxelState.FREE_KNOWN
OCCUPIED_KNOWN = VoxelState.OCCUPIED_KNOWN


@dataclass
class DepthScan:
    """A bundle of range measurements from one sensor pose.

    Directions are world-frame unit vectors. ``ranges[i]`` holds the hit
    range for hitting rays and ``max_range`` for misses.
    """

    origin: np.ndarray
    yaw: float
    directions: np.ndarray
    ranges: np.ndarray
    hits: np.ndarray
    max_range: float
    horizontal_fov: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.directions = np.asarray(self.directions, dtype=float).reshape(-1, 3)
        self.ranges = np.asarray(self.ranges, dtype=float).reshape(-1)
        self.hits = np.asarray(self.hits, dtype=bool).reshape(-1)

    @property
    def n_rays(self) -> int:
        return self.directions.shape[0]


def _snap(value: np.ndarray, resolution: float) -> np.ndarray:
    return np.round(np.asarray(value, dtype=float) / resolution) * resolution


class SlidingGrid:
    """Body-centered voxel map with query-time inflation.

    One writer mutates an instance at a time; readers that need a stable
    view take ``copy()`` (copy-on-publish).  Distance fields used by the
    inflated queries are recomputed lazily after mutations.
    """

    def __init__(self, resolution, dims, center, inflation_radius=0.0):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        if inflation_radius < 0:
            raise ValueError("inflation_radius must be >= 0")
        self.resolution = float(resolution)
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive voxel counts")
        self.center = _snap(center, self.resolution)
        self.inflation_radius = float(inflation_radius)
        self.cells = np.full(self.dims, UNKNOWN, dtype=np.uint8)
        self._version = 0
        self._cache = {}

    # -- geometry ---------------------------------------------------------

    @property
    def origin(self) -> np.ndarray:
        half = np.asarray(self.dims) * self.resolution / 2.0
        return self.center - half

    @property
    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin
        hi = lo + np.asarray(self.dims) * self.resolution
        return lo, hi

    @property
    def half_diagonal(self) -> float:
        return self.resolution * np.sqrt(3.0) / 2.0

    def contains(self, point) -> bool:
        lo, hi = self.extent
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= lo) and np.all(p < hi))

    def voxel_of(self, point):
        """Integer index of the voxel containing ``point``, or None."""
        idx = np.floor((np.asarray(point, dtype=float) - self.origin) / self.resolution)
        idx = idx.astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            return None
        return tuple(idx)

    def voxel_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.resolution

    def boundary_distance(self, point) -> float:
        """Distance from an interior point to the extent exterior (<=0 outside)."""
        lo, hi = self.extent
        p = np.asarray(point, dtype=float)
        return float(min(np.min(p - lo), np.min(hi - p)))

    def copy(self) -> "SlidingGrid":
        dup = SlidingGrid(self.resolution, self.dims, self.center, self.inflation_radius)
        dup.cells = self.cells.copy()
        return dup

    def _touch(self):
        self._version += 1
        self._cache.clear()

    # -- fusion -----------------------------------------------------------

    def fuse_scan(self, scan: DepthScan) -> "SlidingGrid":
        """Fuse one depth scan in place and return self.

        Raises ValueError (grid untouched) when the sensor pose lies
        outside the stored extent.
        """
        if not self.contains(scan.origin):
            raise ValueError("scan pose outside grid extent")
        if scan.n_rays == 0:
            return self
        free_idx, occ_idx = self._trace(scan)
        if free_idx.size:
            flat = self.cells.reshape(-1)
            keep = flat[free_idx] != OCCUPIED_KNOWN
            flat[free_idx[keep]] = FREE_KNOWN
        if occ_idx.size:
            self.cells.reshape(-1)[occ_idx] = OCCUPIED_KNOWN
        self._touch()
        return self

    def _trace(self, scan: DepthScan):
        """Exact voxel walk for all rays at once.

        Returns flat indices of pass-through voxels and of hit endpoint
        voxels.  The walk advances every active ray by one voxel per
        iteration (lockstep DDA), so the loop count is bounded by the
        longest ray in voxels.
        """
        res = self.resolution
        origin = self.origin
        dims = np.asarray(self.dims)
        n = scan.n_rays
        d = scan.directions
        lengths = np.where(scan.hits, scan.ranges, scan.max_range)

        v = np.floor((scan.origin - origin) / res).astype(int)
        v = np.repeat(v[None, :], n, axis=0)
        step = np.sign(d).astype(int)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_delta = np.where(d != 0.0, res / np.abs(d), np.inf)
            lo_bound = origin + v * res
            t_max = np.where(
                step > 0,
                (lo_bound + res - scan.origin) / d,
                np.where(step < 0, (lo_bound - scan.origin) / d, np.inf),
            )
        t_max = np.where(np.isfinite(t_max), t_max, np.inf)

        alive = np.ones(n, dtype=bool)
        free_parts = []
        occ_parts = []
        strides = np.array([self.dims[1] * self.dims[2], self.dims[2], 1])

        def flat(vox):
            return vox @ strides

        max_iter = int(np.ceil(lengths.max() / res) * 3 + 6)
        for _ in range(max_iter):
            if not alive.any():
                break
            t_next = t_max.min(axis=1)
            finishing = alive & (t_next >= lengths - 1e-12)
            if finishing.any():
                vox = v[finishing]
                inb = np.all((vox >= 0) & (vox < dims), axis=1)
                fin_flat = flat(vox[inb])
                hit = scan.hits[finishing][inb]
                occ_parts.append(fin_flat[hit])
                free_parts.append(fin_flat[~hit])
                alive &= ~finishing
            if not alive.any():
                break
            vox = v[alive]
            inb = np.all((vox >= 0) & (vox < dims), axis=1)
            free_parts.append(flat(vox[inb]))
            axis = np.argmin(t_max[alive], axis=1)
            rows = np.flatnonzero(alive)
            v[rows, axis] += step[rows, axis]
            t_max[rows, axis] += t_delta[rows, axis]
            # rays that left the extent cannot re-enter a convex box
            out = np.any((v[rows] < 0) | (v[rows] >= dims), axis=1)
            alive[rows[out]] = False

        free_idx = np.unique(np.concatenate(free_parts)) if free_parts else np.empty(0, int)
        occ_idx = np.unique(np.concatenate(occ_parts)) if occ_parts else np.empty(0, int)
        if free_idx.size and occ_idx.size:
            free_idx = np.setdiff1d(free_idx, occ_idx, assume_unique=True)
        return free_idx, occ_idx

    def mark_free_ball(self, center, radius: float) -> "SlidingGrid":
        """Upgrade unknown voxels (centers within ``radius``) to free-known.

        Occupied voxels are never touched.  Used to seed verified clearance
        such as a take-off volume.
        """
        idx = self.voxel_of(center)
        if idx is None:
            return self
        reach = int(np.ceil(radius / self.resolution)) + 1
        sl, lo = self._window(idx, reach)
        sub = self.cells[sl]
        coords = np.argwhere(np.ones(sub.shape, dtype=bool)) + lo
        centers = self.origin + (coords + 0.5) * self.resolution
        close = np.sum((centers - np.asarray(center, dtype=float)) ** 2, axis=1) <= radius**2
        pick = coords[close]
        states = self.cells[pick[:, 0], pick[:, 1], pick[:, 2]]
        pick = pick[states == UNKNOWN]
        if pick.size:
            self.cells[pick[:, 0], pick[:, 1], pick[:, 2]] = FREE_KNOWN
            self._touch()
        return self

    # -- recenter ---------------------------------------------------------

    def recenter(self, new_center) -> "SlidingGrid":
        """Slide the map so it is centered on ``new_center`` (lattice-snapped).

        Voxels whose world location stays inside the new extent keep their
        state; newly covered locations become unknown.
        """
        snapped = _snap(new_center, self.resolution)
        shift = np.round((snapped - self.center) / self.resolution).astype(int)
        if not shift.any():
            self.center = snapped
            return self
        fresh = np.full(self.dims, UNKNOWN, dtype=np.uint8)
        src_lo = np.maximum(shift, 0)
        src_hi = np.minimum(np.asarray(self.dims) + shift, self.dims)
        if np.all(src_hi > src_lo):
            dst_lo = src_lo - shift
            dst_hi = src_hi - shift
            fresh[
                dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]
            ] = self.cells[src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]]
        self.cells = fresh
        self.center = snapped
        self._touch()
        return self

    # -- distance fields and masks ----------------------------------------

    def _distance_field(self, state: int) -> np.ndarray:
        """Per-voxel center distance (m) to the nearest voxel of ``state``."""
        key = ("dist", state)
        if key not in self._cache:
            mask = self.cells == state
            if not mask.any():
                dist = np.full(self.dims, np.inf)
            else:
                dist = ndimage.distance_transform_edt(~mask, sampling=self.resolution)
            self._cache[key] = dist
        return self._cache[key]

    def _boundary_field(self) -> np.ndarray:
        """Per-voxel center distance to the extent exterior."""
        key = ("bdist",)
        if key not in self._cache:
            axes = [
                np.minimum(self.axis_centers(a) - self.extent[0][a], self.extent[1][a] - self.axis_centers(a))
                for a in range(3)
            ]
            self._cache[key] = np.minimum.reduce(
                np.meshgrid(*axes, indexing="ij", copy=False)
            )
        return self._cache[key]

    def inflated_mask(self, states, radius=None) -> np.ndarray:
        """Boolean array: centers within ``radius`` of any voxel in ``states``.

        For the unknown state the region beyond the map extent counts as
        well, via the distance to the extent boundary.  The result is
        cached per (states, radius) until the grid is next mutated.
        """
        r = self.inflation_radius if radius is None else float(radius)
        key = ("mask", tuple(sorted(states)), round(r, 12))
        if key not in self._cache:
            mask = np.zeros(self.dims, dtype=bool)
            for s in states:
                mask |= self._distance_field(s) <= r + 1e-12
                if s == UNKNOWN:
                    mask |= self._boundary_field() <= r + 1e-12
            self._cache[key] = mask
        return self._cache[key]

    def state_coords(self, states) -> np.ndarray:
        """World centers of all voxels whose raw state is in ``states``."""
        key = ("coords", tuple(sorted(states)))
        if key not in self._cache:
            mask = np.zeros(self.dims, dtype=bool)
            for s in states:
                mask |= self.cells == s
            idx = np.argwhere(mask)
            self._cache[key] = self.origin + (idx + 0.5) * self.resolution
        return self._cache[key]

    def mask_coords(self, mask: np.ndarray) -> np.ndarray:
        idx = np.argwhere(mask)
        return self.origin + (idx + 0.5) * self.resolution

    # -- point queries ------------------------------------------------------

    def _window(self, idx, reach):
        lo = [max(idx[a] - reach, 0) for a in range(3)]
        hi = [min(idx[a] + reach + 1, self.dims[a]) for a in range(3)]
        return tuple(slice(lo[a], hi[a]) for a in range(3)), np.asarray(lo)

    def _any_within(self, point, state, radius) -> bool:
        """Exact: is any voxel center of ``state`` within ``radius`` of point?"""
        idx = self.voxel_of(point)
        if idx is None:
            return False
        dist = self._distance_field(state)[idx]
        hd = self.half_diagonal
        if dist > radius + hd:
            return False
        if dist <= radius - hd:
            return True
        reach = int(np.ceil((radius + hd) / self.resolution)) + 1
        sl, lo = self._window(idx, reach)
        sub = self.cells[sl] == state
        if not sub.any():
            return False
        coords = np.argwhere(sub) + lo
        centers = self.origin + (coords + 0.5) * self.resolution
        d2 = np.sum((centers - np.asarray(point, dtype=float)) ** 2, axis=1)
        return bool(np.min(d2) <= radius * radius + 1e-12)

    def classify(self, point, inflate: bool = False) -> int:
        """State at a continuous point; with ``inflate`` the point picks up
        the label of any occupied (then unknown) voxel center within the
        inflation radius, occupied taking precedence. Points outside the
        extent are unknown."""
        idx = self.voxel_of(point)
        if idx is None:
            return UNKNOWN
        state = int(self.cells[idx])
        if not inflate:
            return state
        r = self.inflation_radius
        if state == OCCUPIED_KNOWN or self._any_within(point, OCCUPIED_KNOWN, r):
            return OCCUPIED_KNOWN
        if state == UNKNOWN:
            return UNKNOWN
        if self.boundary_distance(point) < r:
            return UNKNOWN
        if self._any_within(point, UNKNOWN, r):
            return UNKNOWN
        return FREE_KNOWN

    def nearest_cell(self, point, states):
        """Exact nearest voxel center among ``states`` (unknown space outside
        the extent counts with the distance to the boundary).

        Returns (position, distance) or None when no such voxel exists.
        """
        if not states:
            raise ValueError("states must be nonempty")
        p = np.asarray(point, dtype=float)
        best = None
        coords = self.state_coords(states)
        if coords.shape[0]:
            d2 = np.sum((coords - p) ** 2, axis=1)
            i = int(np.argmin(d2))
            best = (coords[i].copy(), float(np.sqrt(d2[i])))
        if UNKNOWN in states:
            cand = self._nearest_exterior(p)
            if cand is not None and (best is None or cand[1] < best[1]):
                best = cand
        return best

    def _nearest_exterior(self, p):
        lo, hi = self.extent
        if np.any(p <= lo) or np.any(p >= hi):
            return p.copy(), 0.0
        gaps = np.concatenate([p - lo, hi - p])
        j = int(np.argmin(gaps))
        q = p.copy()
        if j < 3:
            q[j] = lo[j]
        else:
            q[j - 3] = hi[j - 3]
        return q, float(gaps[j])

    # -- serialization ------------------------------------------------------

    def dump(self) -> str:
        """Header line plus run-length-encoded C-order state stream."""
        head = "%.17g %d %d %d %.17g %.17g %.17g" % (
            self.resolution,
            *self.dims,
            *self.center,
        )
        flat = self.cells.reshape(-1)
        runs = []
        if flat.size:
            change = np.flatnonzero(np.diff(flat)) + 1
            starts = np.concatenate([[0], change])
            ends = np.concatenate([change, [flat.size]])
            runs = [f"{e - s} {int(flat[s])}" for s, e in zip(starts, ends)]
        return head + "\n" + " ".join(runs) + "\n"


def load_grid(text: str, inflation_radius: float = 0.0) -> SlidingGrid:
    lines = text.strip().splitlines()
    parts = lines[0].split()
    res = float(parts[0])
    dims = tuple(int(x) for x in parts[1:4])
    center = np.array([float(x) for x in parts[4:7]])
    grid = SlidingGrid(res, dims, center, inflation_radius)
    tokens = (lines[1] if len(lines) > 1 else "").split()
    flat = np.empty(int(np.prod(dims)), dtype=np.uint8)
    pos = 0
    for count, state in zip(tokens[0::2], tokens[1::2]):
        c = int(count)
        flat[pos : pos + c] = int(state)
        pos += c
    if pos != flat.size:
        raise ValueError("run-length stream does not cover the grid")
    grid.cells = flat.reshape(dims)
    grid._touch()
    return grid
